use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simagent_core::autodiff::{Graph, Tensor, Var};
use simagent_core::posttrain::*;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

struct Toy {
    x: Tensor,
    w: Tensor,
    u: Tensor,
    reference: Tensor,
    rows: LossRows,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f, v) = (6, 4, 5);
    let x = rand_tensor(&mut rng, n, f);
    let w = rand_tensor(&mut rng, f, v);
    let u = rand_tensor(&mut rng, f, 1);
    let reference = rand_tensor(&mut rng, n, v);
    let rows = LossRows {
        actions: (0..n).map(|_| rng.gen_range(0..v)).collect(),
        advantages: (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        returns: (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect(),
        sequences: vec![vec![0, 2, 4], vec![1, 3, 5]],
    };
    Toy { x, w, u, reference, rows }
}

fn loss_at(t: &Toy, w: &Tensor, u: &Tensor, method: Method, cfg: &PosttrainConfig) -> (f64, Option<(Tensor, Tensor)>) {
    let mut g = Graph::new();
    let x = g.constant(t.x.clone());
    let wv = g.input(w.clone());
    let uv = g.input(u.clone());
    let logits = g.matmul(x, wv).unwrap();
    let values: Option<Var> = if method == Method::A2c { Some(g.matmul(x, uv).unwrap()) } else { None };
    let terms = policy_loss(&mut g, method, logits, values, Some(&t.reference), &t.rows, cfg).unwrap();
    let l = g.value(terms.loss).item();
    let grads = g.backward(terms.loss).unwrap();
    let gw = grads.wrt(wv).map(|s| Tensor::from_vec(w.rows, w.cols, s.to_vec()).unwrap()).unwrap_or(Tensor::zeros(w.rows, w.cols));
    let gu = grads.wrt(uv).map(|s| Tensor::from_vec(u.rows, u.cols, s.to_vec()).unwrap()).unwrap_or(Tensor::zeros(u.rows, u.cols));
    (l, Some((gw, gu)))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / n.max(1e-8)
}

#[test]
fn every_method_loss_matches_finite_differences() {
    let h = 1e-5;
    for method in Method::ALL {
        for est in [KlEstimator::Full, KlEstimator::Sampled] {
            let t = toy(3);
            let cfg = PosttrainConfig { method, kl_estimator: est, ..PosttrainConfig::default() };
            let (_, grads) = loss_at(&t, &t.w, &t.u, method, &cfg);
            let gw = grads.unwrap().0;
            let mut num_w = vec![0.0; t.w.len()];
            for i in 0..t.w.len() {
                let (mut p, mut m) = (t.w.clone(), t.w.clone());
                p.data[i] += h;
                m.data[i] -= h;
                num_w[i] = (loss_at(&t, &p, &t.u, method, &cfg).0 - loss_at(&t, &m, &t.u, method, &cfg).0) / (2.0 * h);
            }
            let e = rel_err(&gw.data, &num_w);
            assert!(e < 1e-4, "{method:?} {est:?} policy grad error {e}");
        }
    }
}

fn cfg_a2c() -> PosttrainConfig {
    PosttrainConfig { method: Method::A2c, ..PosttrainConfig::default() }
}

#[test]
fn a2c_value_gradient_is_regression_only() {
    // with V detached in the policy term, dL/du = c * d/du mean((Xu - R)^2)
    let t = toy(5);
    let cfg = cfg_a2c();
    let (_, grads) = loss_at(&t, &t.w, &t.u, Method::A2c, &cfg);
    let gu = grads.unwrap().1;
    let n = t.x.rows as f64;
    let mut expect = vec![0.0; t.u.len()];
    for r in 0..t.x.rows {
        let v: f64 = (0..t.u.len()).map(|j| t.x.get(r, j) * t.u.data[j]).sum();
        for (j, e) in expect.iter_mut().enumerate() {
            *e += cfg.value_coef * 2.0 * (v - t.rows.returns[r]) * t.x.get(r, j) / n;
        }
    }
    assert!(rel_err(&gu.data, &expect) < 1e-12);
}

#[test]
fn two_token_reinforce_gradient() {
    // one state, logits (a, b), sampled action 0, return R: d/da = -R * (1 - p0)
    let r = -0.75;
    let (a, b) = (0.3, -0.4);
    let mut g = Graph::new();
    let l = g.input(Tensor::from_vec(1, 2, vec![a, b]).unwrap());
    let rows = LossRows { actions: vec![0], advantages: vec![r], returns: vec![r], sequences: vec![vec![0]] };
    let cfg = PosttrainConfig { method: Method::Reinforce, ..PosttrainConfig::default() };
    let terms = policy_loss(&mut g, Method::Reinforce, l, None, None, &rows, &cfg).unwrap();
    let grads = g.backward(terms.loss).unwrap();
    let p0 = a.exp() / (a.exp() + b.exp());
    let gr = grads.wrt(l).unwrap();
    assert!((gr[0] - (-r * (1.0 - p0))).abs() < 1e-14);
    assert!((gr[1] - (r * (1.0 - p0))).abs() < 1e-14);
}

#[test]
fn zero_advantages_give_zero_loss_and_gradient() {
    let mut t = toy(7);
    t.rows.advantages = vec![0.0; 6];
    let cfg = PosttrainConfig { lambda_kl: 0.0, lambda_h: 0.0, ..PosttrainConfig::default() };
    let (l, grads) = loss_at(&t, &t.w, &t.u, Method::Grpo, &cfg);
    assert_eq!(l, 0.0);
    assert!(grads.unwrap().0.data.iter().all(|&v| v == 0.0));
}

#[test]
fn entropy_bonus_at_uniform() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(3, 169));
    let rows = LossRows { actions: vec![0, 1, 2], advantages: vec![0.0; 3], returns: vec![0.0; 3], sequences: vec![vec![0, 1, 2]] };
    let cfg = PosttrainConfig { lambda_kl: 0.0, ..PosttrainConfig::default() };
    let terms = policy_loss(&mut g, Method::Grpo, l, None, None, &rows, &cfg).unwrap();
    assert!((terms.entropy - 169f64.ln()).abs() < 1e-12);
    assert!((g.value(terms.loss).item() + 0.01 * 169f64.ln()).abs() < 1e-12);
}

#[test]
fn kl_fixtures() {
    let p = Tensor::from_vec(2, 3, vec![0.2, -0.1, 1.0, 0.0, 0.5, 0.5]).unwrap();
    let seqs = vec![vec![0, 1]];
    let (_, agg) = kl_terms(&p, &p, &[0, 1], &seqs, KlEstimator::Full).unwrap();
    assert_eq!(agg, 0.0);

    // by hand: P = (0.5, 0.25, 0.25), Q = (0.25, 0.25, 0.5)
    // KL = 0.5 ln 2 + 0 + 0.25 ln 0.5 = 0.25 ln 2
    let lp = |v: [f64; 3]| v.iter().map(|x: &f64| x.ln()).collect::<Vec<_>>();
    let pt = Tensor::from_vec(1, 3, lp([0.5, 0.25, 0.25])).unwrap();
    let qt = Tensor::from_vec(1, 3, lp([0.25, 0.25, 0.5])).unwrap();
    let (terms, agg) = kl_terms(&pt, &qt, &[0], &[vec![0]], KlEstimator::Full).unwrap();
    assert!((agg - 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((terms[0] - agg).abs() < 1e-15);
    let (_, sampled) = kl_terms(&pt, &qt, &[0], &[vec![0]], KlEstimator::Sampled).unwrap();
    assert!((sampled - 0.5 * 2f64.ln()).abs() < 1e-15);

    // one spiked step dominates: the aggregate is that step's KL, not the mean
    let n = 5;
    let mut pol = Tensor::zeros(n, 3);
    let refr = Tensor::zeros(n, 3);
    pol.data[2 * 3] = 4.0;
    let (terms, agg) = kl_terms(&pol, &refr, &[0; 5], &[(0..n).collect()], KlEstimator::Full).unwrap();
    assert!(terms[2] > 0.0 && terms.iter().enumerate().all(|(i, &t)| i == 2 || t == 0.0));
    assert_eq!(agg, terms[2]);
    assert!(agg > terms.iter().sum::<f64>() / n as f64);
}

#[test]
fn large_kl_weight_keeps_policy_near_reference() {
    use simagent_core::autodiff::{Adam, ParamStore};
    let t = toy(11);
    let run = |lambda_kl: f64| {
        let mut store = ParamStore::new();
        let id = store.add("w", t.w.clone()).unwrap();
        let mut opt = Adam::new(&store);
        let reference = {
            let mut g = Graph::inference();
            let x = g.constant(t.x.clone());
            let w = g.constant(t.w.clone());
            let l = g.matmul(x, w).unwrap();
            g.value(l).clone()
        };
        let cfg = PosttrainConfig { lambda_kl, lambda_h: 0.0, ..PosttrainConfig::default() };
        for _ in 0..8 {
            let mut g = Graph::new();
            let x = g.constant(t.x.clone());
            let w = g.param(&store, id);
            let l = g.matmul(x, w).unwrap();
            let terms = policy_loss(&mut g, Method::Grpo, l, None, Some(&reference), &t.rows, &cfg).unwrap();
            let grads = g.backward(terms.loss).unwrap().param_grads(&store);
            opt.update(&mut store, &grads, 1e-2);
        }
        store.get(id).data.iter().zip(&t.w.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let (free, tied) = (run(0.0), run(1e4));
    assert!(tied < free, "{tied} vs {free}");
}

proptest! {
    #[test]
    fn normalized_groups_are_standardized(v in proptest::collection::vec(-3.0f64..0.0, 2..16)) {
        let a = group_normalize(&v, 1e-6).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!(std == 0.0 || (std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded(v in proptest::collection::vec(-20.0f64..20.0, 169)) {
        let h = entropy(&v);
        prop_assert!(h >= -1e-12 && h <= 169f64.ln() + 1e-12);
    }

    #[test]
    fn discrete_group_normalization(bits in proptest::collection::vec(0u8..4, 2..12)) {
        // returns built from the {0, -0.5, -1} reward alphabet
        let v: Vec<f64> = bits.iter().map(|&b| -0.5 * b as f64).collect();
        let a = group_normalize(&v, 1e-6).unwrap();
        let n = a.len() as f64;
        prop_assert!((a.iter().sum::<f64>() / n).abs() < 1e-12);
    }
}
