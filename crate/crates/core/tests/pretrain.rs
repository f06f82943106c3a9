use simagent_core::autodiff::Graph;
use simagent_core::generator::{generate_scenario, Template};
use simagent_core::model::*;
use simagent_core::pretrain::*;

fn corpus(n: usize, seed: u64) -> Vec<simagent_core::scenario::Scenario> {
    (0..n).map(|i| generate_scenario(Template::ALL[i % 4], seed * 100_000 + i as u64)).collect()
}

#[test]
fn init_loss_is_log_vocab() {
    let m = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let data = corpus(6, 1);
    let set = build_samples(&data, &[0, 1, 2, 3, 4, 5], &[1.0, 2.5], 16);
    let r = evaluate(&m, &data, &set.samples, 4).unwrap();
    assert!((r.loss - 169f64.ln()).abs() < 1e-3);
}

#[test]
fn sample_counts_follow_anchor_windows() {
    let data = corpus(4, 2);
    let cfg = TrainConfig::default();
    let set = build_samples(&data, &[0, 1, 2, 3], &cfg.anchors(), cfg.horizon);
    assert_eq!(set.samples.len() + set.skipped, 4 * 8);
    assert_eq!(set.skipped, 0);
    // 9 s scenarios: 16 future steps at 1.0 s, 9 at 4.5 s
    let at = |a: f64| set.samples.iter().find(|s| s.scenario == 0 && s.anchor == a).unwrap().n_future;
    assert_eq!((at(1.0), at(4.5)), (16, 9));
    let one = build_samples(&data, &[0], &[1.0], 16);
    assert_eq!(one.samples.len(), 1);
    let late = build_samples(&data, &[0], &[9.0, 0.5], 16);
    assert_eq!((late.samples.len(), late.skipped), (0, 2));
}

#[test]
fn one_scenario_overfits() {
    let data = corpus(1, 3);
    let mut m = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let cfg = TrainConfig {
        k: 1,
        data_fraction: DataFraction::Augmented,
        val_fraction: 0.0,
        max_steps: Some(200),
        batch_size: 1,
        lr_max: 3e-3,
        lr_min: 3e-3,
        other_loss_weight: 0.0,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let mut first = Vec::new();
    let report = train_with(&mut m, &data, &cfg, &mut |l| first.push(l.train_loss)).unwrap();
    eprintln!("200 steps in {:?}", t0.elapsed());
    assert_eq!(report.steps, 200);
    let train = build_samples(&data, &[0], &[1.0], 16);
    let r = evaluate(&m, &data, &train.samples, 1).unwrap();
    eprintln!("overfit accuracy {} loss {}", r.accuracy, r.loss);
    assert!(r.accuracy >= 0.99);
    // the first ten steps descend
    assert!(first.windows(2).take(10).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn training_is_deterministic() {
    let data = corpus(12, 4);
    let cfg = TrainConfig { k: 2, max_steps: Some(6), batch_size: 4, ..TrainConfig::default() };
    let run = || {
        let mut m = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
        let r = train(&mut m, &data, &cfg).unwrap();
        (r, m.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn per_sample_cost_probe() {
    let data = corpus(8, 5);
    for p in [SizePreset::Mini, SizePreset::Medium] {
        let m = PolicyModel::new(&ModelConfig::preset(p)).unwrap();
        let prepared: Vec<_> = (0..8).map(|i| prepare_sample(&m, &data[i], 1.0, 16).unwrap()).collect();
        let t0 = std::time::Instant::now();
        let mut g = Graph::new();
        let bl = batch_loss(&m, &mut g, &prepared, 0.1).unwrap();
        let _ = g.backward(bl.loss).unwrap();
        eprintln!("{:?}: {} params, {:?} per sample", p, m.num_params(), t0.elapsed() / 8);
    }
}

#[test]
#[ignore]
fn scaling_probe() {
    let n: usize = std::env::var("N").map(|v| v.parse().unwrap()).unwrap_or(300);
    let steps: usize = std::env::var("S").map(|v| v.parse().unwrap()).unwrap_or(300);
    let data = corpus(n, 9);
    let val: f64 = std::env::var("V").map(|v| v.parse().unwrap()).unwrap_or(0.1);
    let base = TrainConfig { max_steps: Some(steps), other_loss_weight: 0.0, val_fraction: val, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    scaling_sweep(
        &data,
        &[SizePreset::Mini, SizePreset::Medium],
        &[DataFraction::Fraction(0.1), DataFraction::Fraction(1.0), DataFraction::Augmented],
        &[0, 1, 2],
        &base,
        &mut |r| eprintln!("{:?} {} seed {} train {:.3} val {:.4} acc {:.3} t={:?}", r.preset, r.data.label(), r.seed, r.train_loss, r.val_loss, r.val_acc, t0.elapsed()),
    )
    .unwrap();
}
