use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use simagent_core::environment::score_rollouts;
use simagent_core::generator::{generate_scenario, Template};
use simagent_core::model::{ModelConfig, PolicyModel, RolloutOptions, SizePreset};
use simagent_core::testtime::*;

fn brute_force(features: &[Vec<f64>], k: usize) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = features.len();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let c: f64 = features.iter().map(|p| idx.iter().map(|&m| d(p, &features[m])).fold(f64::INFINITY, f64::min)).sum();
        best = best.min(c);
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centers = [[0.0, 0.0, 0.0], [20.0, 5.0, 2.0], [-8.0, 25.0, -4.0]];
    (0..12).map(|i| centers[i % 3].iter().map(|c| c + noise.sample(&mut rng)).collect()).collect()
}

#[test]
fn medoids_match_exhaustive_optimum_on_blobs() {
    for seed in 0..20 {
        let f = blobs(seed);
        let m = k_medoids(&f, 3, seed).unwrap();
        let opt = brute_force(&f, 3);
        assert!((m.cost - opt).abs() < 1e-9, "seed {seed}: {} vs {opt}", m.cost);
        // one medoid per blob
        let mut blob: Vec<usize> = m.medoids.iter().map(|&i| i % 3).collect();
        blob.sort();
        assert_eq!(blob, vec![0, 1, 2]);
        for (i, &a) in m.assignment.iter().enumerate() {
            assert_eq!(m.medoids[a] % 3, i % 3);
        }
    }
}

#[test]
fn separated_pairs_give_one_medoid_each() {
    let f = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![30.0, 0.0], vec![30.0, 0.4], vec![0.0, 30.0], vec![0.3, 30.0]];
    let m = k_medoids(&f, 3, 9).unwrap();
    let pairs: Vec<usize> = m.medoids.iter().map(|i| i / 2).collect();
    assert_eq!(pairs, vec![0, 1, 2]);
    assert!((m.cost - brute_force(&f, 3)).abs() < 1e-12);
}

#[test]
fn medoids_are_deterministic() {
    let f = blobs(3);
    assert_eq!(k_medoids(&f, 4, 7).unwrap(), k_medoids(&f, 4, 7).unwrap());
}

proptest! {
    #[test]
    fn pam_cost_never_increases(pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 4..14), k in 1usize..4, seed in 0u64..100) {
        let m = k_medoids(&pts, k.min(pts.len()), seed).unwrap();
        prop_assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*m.history.last().unwrap(), m.cost);
        prop_assert!(m.medoids.iter().all(|&i| i < pts.len()));
    }
}

fn mini() -> PolicyModel {
    PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap()
}

#[test]
fn pass_through_returns_first_samples() {
    let m = mini();
    let s = generate_scenario(Template::Intersection, 5);
    let cfg = TestTimeConfig { n: 4, batch: 4, use_search: false, seed: 2, ..TestTimeConfig::default() };
    let r = test_time_generate(&m, &s, &cfg, &NullClock).unwrap();
    assert_eq!((r.batch.rollouts.len(), r.sampled), (4, 4));
    // the same wave seed drawn directly
    use rand::Rng;
    let wave_seed: u64 = ChaCha8Rng::seed_from_u64(2).gen();
    let mut direct = m.rollout(&s, &RolloutOptions { n_rollouts: 4, horizon: 16, temperature: 1.0, seed: wave_seed }).unwrap();
    score_rollouts(&s, &mut direct);
    assert_eq!(r.batch.rollouts, direct.rollouts);
}

fn fitted(s: &simagent_core::scenario::Scenario) -> PolicyModel {
    use simagent_core::pretrain::{train_with, DataFraction, TrainConfig};
    let mut m = mini();
    let cfg = TrainConfig {
        k: 1,
        data_fraction: DataFraction::Augmented,
        val_fraction: 0.0,
        max_steps: Some(80),
        batch_size: 1,
        lr_max: 3e-3,
        lr_min: 3e-3,
        other_loss_weight: 0.0,
        ..TrainConfig::default()
    };
    train_with(&mut m, std::slice::from_ref(s), &cfg, &mut |_| {}).unwrap();
    m
}

#[test]
fn search_returns_only_clean_rollouts() {
    let s = generate_scenario(Template::Merge, 11);
    let m = fitted(&s);
    let cfg = TestTimeConfig { n: 4, batch: 16, max_candidate_budget: 256, seed: 1, ..TestTimeConfig::default() };
    let r = test_time_generate(&m, &s, &cfg, &NullClock).unwrap();
    assert!(!r.budget_exhausted, "{:?}", r.warning);
    assert_eq!(r.batch.rollouts.len(), 4);
    let mut rescored = r.batch.clone();
    score_rollouts(&s, &mut rescored);
    assert!(rescored.rollouts.iter().all(|x| x.total_penalty() == 0.0));
}

#[test]
fn scarce_budget_fills_by_penalty() {
    let m = mini();
    let s = generate_scenario(Template::Intersection, 3);
    // high temperature makes clean rollouts rare
    let cfg = TestTimeConfig { n: 8, batch: 8, max_candidate_budget: 8, temperature: 50.0, seed: 4, ..TestTimeConfig::default() };
    let r = test_time_generate(&m, &s, &cfg, &NullClock).unwrap();
    assert_eq!(r.batch.rollouts.len(), 8);
    if r.budget_exhausted {
        assert!(r.warning.is_some());
        let p: Vec<f64> = r.batch.rollouts[r.feasible..].iter().map(|x| x.total_penalty()).collect();
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
    } else {
        assert_eq!(r.feasible, 8);
    }
}

#[test]
fn clustering_reduces_to_n() {
    let m = mini();
    let s = generate_scenario(Template::Straight, 2);
    let cfg = TestTimeConfig { n: 3, batch: 6, use_search: false, use_cluster: true, k_tt: Some(2), max_candidate_budget: 6, seed: 5, ..TestTimeConfig::default() };
    let r = test_time_generate(&m, &s, &cfg, &NullClock).unwrap();
    assert_eq!((r.sampled, r.batch.rollouts.len()), (6, 3));
    assert_eq!(test_time_generate(&m, &s, &cfg, &NullClock).unwrap(), r);
    assert!(test_time_generate(&m, &s, &TestTimeConfig { n: 0, ..cfg }, &NullClock).is_err());
}
