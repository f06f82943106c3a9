//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,9` runs a subset. `ACCEPTANCE_STRICT=1` turns any
//! failure into a non-zero exit. `ACCEPTANCE_CACHE=<dir>` keeps the
//! pretrained baseline between runs.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simagent::checkpoint;
use simagent::clock::SystemClock;
use simagent_core::autodiff::*;
use simagent_core::embedding::*;
use simagent_core::environment::{ground_truth_batch, score_rollouts, Environment, RolloutBatch};
use simagent_core::generator::{generate_scenario, Template};
use simagent_core::geometry::{Pose2, Vec2};
use simagent_core::metrics::*;
use simagent_core::model::*;
use simagent_core::posttrain::*;
use simagent_core::pretrain::*;
use simagent_core::scenario::Scenario;
use simagent_core::testtime::*;
use simagent_core::tokenizer::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

#[derive(Default)]
struct Shared {
    baseline: Option<PolicyModel>,
}

fn corpus(templates: &[Template], n: usize, base: u64) -> Vec<Scenario> {
    (0..n).map(|i| generate_scenario(templates[i % templates.len()], base + i as u64)).collect()
}

// ---------------------------------------------------------------- tokenizer

fn c1() -> Outcome {
    let c = TokenizerConfig::default();
    let bins_ok = c.bins_per_axis == 128 && c.range == 18.0 && c.quantize(-18.0) == 0 && c.quantize(17.99) == 127;
    let span_ok = c.verlet_span == 6 && c.components(MotionToken(0)) == (-6, -6) && c.components(MotionToken(168)) == (6, 6);
    let still: Vec<Pose2> = (0..19).map(|_| Pose2::new(3.0, -2.0, 0.7)).collect();
    let cv: Vec<Pose2> = (0..19).map(|j| Pose2::new(1.0 + 4.1 * j as f64 * 0.8, 2.0 + 4.1 * j as f64 * 0.6, 0.6435)).collect();
    let all_keep = |p: &[Pose2]| tokenize_poses(p, &c).map(|t| t.tokens.iter().all(|&k| k == KEEP_TOKEN)).unwrap_or(false);
    let keep_ok = KEEP_TOKEN.index() == 84 && c.token(0, 0) == KEEP_TOKEN && all_keep(&still) && all_keep(&cv);
    outcome(
        VOCAB_SIZE == 169 && bins_ok && span_ok && keep_ok,
        format!("vocab {VOCAB_SIZE}, {} bins over +-{}, span +-{}, keep token {}", c.bins_per_axis, c.range, c.verlet_span, KEEP_TOKEN.index()),
    )
}

const W: f64 = 36.0 / 128.0;

fn oracle_bin(d: f64) -> i32 {
    ((d / W).round() as i32 + 64).clamp(0, 127)
}

/// Reference bins and local displacements in each segment's agent frame.
fn oracle_bins(poses: &[Pose2]) -> (Vec<(i32, i32)>, Vec<(f64, f64)>) {
    let mut heading = poses[0].heading;
    let (mut bins, mut local) = (Vec::new(), Vec::new());
    for w in poses.windows(2) {
        let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
        let (c, s) = (heading.cos(), heading.sin());
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        bins.push((oracle_bin(lx), oracle_bin(ly)));
        local.push((lx, ly));
        if (dx * dx + dy * dy).sqrt() >= 0.05 {
            heading = dy.atan2(dx);
        }
    }
    (bins, local)
}

fn scripted_track(rng: &mut ChaCha8Rng) -> Vec<Pose2> {
    let mut p = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let mut h: f64 = rng.gen_range(-3.1..3.1);
    let mut v: f64 = rng.gen_range(0.0..15.0);
    let mut out = vec![Pose2::new(p.x, p.y, h)];
    let (mut acc, mut yaw) = (0.0, 0.0);
    for j in 0..18 {
        if j % 3 == 0 {
            acc = rng.gen_range(-1.5..1.5);
            yaw = rng.gen_range(-0.3..0.3);
        }
        for _ in 0..5 {
            v = (v + acc * 0.1).max(0.0);
            h += yaw * 0.1 * (v / 5.0).min(1.0);
            p = p + Vec2::new(h.cos(), h.sin()) * (v * 0.1);
        }
        out.push(Pose2::new(p.x, p.y, h));
    }
    out
}

fn c2() -> Outcome {
    let cfg = TokenizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut tracks, mut mismatched, mut worst) = (0usize, 0usize, 0.0f64);
    while tracks < 10_000 {
        let poses = scripted_track(&mut rng);
        let tt = match tokenize_poses(&poses, &cfg) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("tokenize failed: {e}")),
        };
        if tt.clamped > 0 {
            continue;
        }
        tracks += 1;
        let (bins, local) = oracle_bins(&poses);
        let decoded = bin_sequence(&tt, &cfg);
        if decoded != bins {
            mismatched += 1;
            continue;
        }
        for (b, (lx, ly)) in decoded.iter().zip(&local) {
            worst = worst.max((cfg.decode_axis(b.0) - lx).abs()).max((cfg.decode_axis(b.1) - ly).abs());
        }
    }
    outcome(mismatched == 0 && worst <= 0.140625 + 1e-9, format!("{tracks} clamp-free tracks, {mismatched} bin mismatches, max axis error {worst:.6} m"))
}

/// Track whose displacement sits within float noise of a bin boundary; its
/// bins may legitimately flip under a transform.
fn on_bin_edge(poses: &[Pose2]) -> bool {
    oracle_bins(poses).1.iter().any(|&(x, y)| [x, y].iter().any(|&d| ((d / W + 0.5) - (d / W + 0.5).round()).abs() < 1e-7))
}

fn c3() -> Outcome {
    let cfg = TokenizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut compared, mut edge, mut differing) = (0usize, 0usize, 0usize);
    for i in 0..100u64 {
        let s = generate_scenario(Template::ALL[i as usize % 4], 1000 + i);
        let rigid = Pose2::new(rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0), rng.gen_range(-3.1..3.1));
        let moved = s.transformed(&rigid);
        for (a, b) in s.agents.iter().zip(&moved.agents) {
            if sample_track(a, 0.0, 18, 0.5).map(|p| on_bin_edge(&p)).unwrap_or(true) {
                edge += 1;
                continue;
            }
            match (tokenize(a, &cfg), tokenize(b, &cfg)) {
                (Ok(x), Ok(y)) => {
                    compared += 1;
                    differing += (x.tokens != y.tokens) as usize;
                }
                _ => edge += 1,
            }
        }
    }
    let mut scene_differs = 0;
    let mut agent_holds = true;
    for seed in 0..8 {
        let (agent_same, scene_same) = mode_consistency_probe(&generate_scenario(Template::Curve, seed), &Pose2::new(0.0, 0.0, FRAC_PI_2));
        agent_holds &= agent_same;
        scene_differs += (!scene_same) as usize;
    }
    outcome(
        differing == 0 && agent_holds && scene_differs >= 1 && compared > 0,
        format!("agent frame: {compared} tracks under 100 transforms, {differing} changed ({edge} on a bin edge skipped); scene frame differs on {scene_differs}/8 turning fixtures"),
    )
}

// ---------------------------------------------------------------- rotary

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn c4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let th = PeConfig::default().theta_schedule(16);
    let (mut rel, mut comp) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (q, k) = (rand_vec(&mut rng, 16), rand_vec(&mut rng, 16));
        let p1 = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let p2 = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let lhs = dot(&rope_position(&q, p1, &th).unwrap(), &rope_position(&k, p2, &th).unwrap());
        let rhs = dot(&q, &rope_position(&k, (p2.0 - p1.0, p2.1 - p1.1), &th).unwrap());
        rel = rel.max((lhs - rhs).abs());

        let x = rand_vec(&mut rng, 8);
        let (a, b) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let two = rope_direction(&rope_direction(&x, a).unwrap(), b).unwrap();
        let one = rope_direction(&x, a + b).unwrap();
        comp = two.iter().zip(&one).fold(comp, |m, (u, v)| m.max((u - v).abs()));
    }

    let mut cfg = ModelConfig::preset(SizePreset::Mini);
    cfg.init_seed = 7;
    let mut m = PolicyModel::new(&cfg).unwrap();
    // give the zero-initialised head some weight so logits carry information
    let mut hr = ChaCha8Rng::seed_from_u64(107);
    for name in ["head.w", "head.b"] {
        let id = m.params.find(name).unwrap();
        for v in &mut m.params.get_mut(id).data {
            *v = hr.gen_range(-0.3..0.3);
        }
    }
    let mut inv = 0.0f64;
    for i in 0..8u64 {
        let sc = generate_scenario(Template::ALL[i as usize % 4], 20 + i);
        let rigid = Pose2::new(rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0), rng.gen_range(-3.1..3.1));
        let logits = |s: &Scenario| {
            let scene = build_scene_input(s, 1.0, &m.config).unwrap();
            let (traces, _) = ground_truth_traces(s, 1.0, 6, &m.tokenizer).unwrap();
            let mut g = Graph::inference();
            let out = m.forward(&mut g, &[(&scene, &traces)]).unwrap();
            g.value(out.logits).data.clone()
        };
        let (a, b) = (logits(&sc), logits(&sc.transformed(&rigid)));
        inv = a.iter().zip(&b).fold(inv, |w, (x, y)| w.max((x - y).abs()));
    }
    outcome(
        rel < 1e-9 && comp < 1e-12 && inv < 1e-6,
        format!("relative position {rel:.2e}, direction composition {comp:.2e}, logits under rigid motion {inv:.2e}"),
    )
}

// ---------------------------------------------------------------- gradients

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn project(g: &mut Graph, out: Var) -> Var {
    let [r, c] = g.shape(out);
    let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), r, c, -1.0, 1.0));
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

fn scalar(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out);
    g.value(l).item()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / n.max(1e-8)
}

fn fd_error(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out);
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric: Vec<f64> = (0..inputs[k].len())
            .map(|i| {
                let (mut p, mut m) = (inputs.to_vec(), inputs.to_vec());
                p[k].data[i] += h;
                m[k].data[i] -= h;
                (scalar(&p, f) - scalar(&m, f)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Box<Build>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |rows, cols| rand_tensor(&mut rng, rows, cols, -1.0, 1.0);
    let pos = rand_tensor(&mut ChaCha8Rng::seed_from_u64(8), 3, 5, 0.5, 2.0);
    let angles = rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), 3, 3, -3.0, 3.0);
    let mut pat = AttnPattern::new();
    pat.push_query([0, 1, 2]);
    pat.push_query([1]);
    pat.push_query([]);
    pat.push_query([3, 0]);
    let pat = Arc::new(pat);
    vec![
        ("matmul", vec![r(3, 4), r(4, 2)], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_t", vec![r(3, 4), r(5, 4)], Box::new(|g: &mut Graph, v: &[Var]| g.matmul_t(v[0], v[1]).unwrap())),
        ("add", vec![r(2, 3), r(2, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![r(2, 3), r(2, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![r(2, 3), r(2, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]).unwrap())),
        ("add_bias", vec![r(4, 3), r(1, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1]).unwrap())),
        ("scale", vec![r(2, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.scale(v[0], -1.7))),
        ("add_scalar", vec![r(2, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.add_scalar(v[0], 0.3))),
        ("layer_norm", vec![r(3, 6), r(1, 6), r(1, 6)], Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2]).unwrap())),
        ("softmax", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0]))),
        ("log_softmax", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.log_softmax(v[0]))),
        ("gelu", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.gelu(v[0]))),
        ("relu", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0]))),
        ("tanh", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.tanh(v[0]))),
        ("exp", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.exp(v[0]))),
        ("log", vec![pos], Box::new(|g: &mut Graph, v: &[Var]| g.log(v[0]))),
        ("embedding", vec![r(5, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.embedding(v[0], &[4, 0, 4, 2]).unwrap())),
        ("concat_cols", vec![r(3, 2), r(3, 4)], Box::new(|g: &mut Graph, v: &[Var]| g.concat_cols(&[v[0], v[1]]).unwrap())),
        ("concat_rows", vec![r(2, 3), r(4, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.concat_rows(&[v[0], v[1]]).unwrap())),
        ("slice_cols", vec![r(3, 6)], Box::new(|g: &mut Graph, v: &[Var]| g.slice_cols(v[0], 2, 3).unwrap())),
        ("slice_rows", vec![r(5, 2)], Box::new(|g: &mut Graph, v: &[Var]| g.slice_rows(v[0], 1, 3).unwrap())),
        ("gather_rows", vec![r(4, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.gather_rows(v[0], &[3, 1, 1, 0]).unwrap())),
        ("segment_max", vec![r(7, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.segment_max(v[0], &[0, 2, 3, 7]).unwrap())),
        ("reduce_max", vec![r(7, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.reduce_max(v[0]).unwrap())),
        ("segment_mean", vec![r(7, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.segment_mean(v[0], &[0, 4, 7]).unwrap())),
        ("sum", vec![r(3, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.sum(v[0]))),
        ("reduce_mean", vec![r(3, 3)], Box::new(|g: &mut Graph, v: &[Var]| g.reduce_mean(v[0]))),
        ("row_sum", vec![r(3, 4)], Box::new(|g: &mut Graph, v: &[Var]| g.row_sum(v[0]))),
        ("pick", vec![r(3, 4)], Box::new(|g: &mut Graph, v: &[Var]| g.pick(v[0], &[3, 0, 2]).unwrap())),
        ("rotary", vec![r(3, 6)], Box::new(move |g: &mut Graph, v: &[Var]| g.rotary(v[0], &angles).unwrap())),
        (
            "sparse_attention",
            vec![r(4, 4), r(4, 4), r(4, 4)],
            Box::new(move |g: &mut Graph, v: &[Var]| g.sparse_attention(v[0], v[1], v[2], pat.clone(), 2).unwrap()),
        ),
        ("cross_entropy", vec![r(3, 5)], Box::new(|g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[1, 4, 0], &[0.5, 1.0, 2.0]).unwrap())),
    ]
}

/// Linear toy policy (and value head) with random loss rows.
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
    Toy {
        x: rand_tensor(&mut rng, n, f, -1.0, 1.0),
        w: rand_tensor(&mut rng, f, v, -1.0, 1.0),
        u: rand_tensor(&mut rng, f, 1, -1.0, 1.0),
        reference: rand_tensor(&mut rng, n, v, -1.0, 1.0),
        rows: LossRows {
            actions: (0..n).map(|_| rng.gen_range(0..v)).collect(),
            advantages: (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            returns: (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect(),
            sequences: vec![vec![0, 2, 4], vec![1, 3, 5]],
        },
    }
}

fn toy_loss(t: &Toy, w: &Tensor, u: &Tensor, cfg: &PosttrainConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let x = g.constant(t.x.clone());
    let (wv, uv) = (g.input(w.clone()), g.input(u.clone()));
    let logits = g.matmul(x, wv).unwrap();
    let values = (cfg.method == Method::A2c).then(|| g.matmul(x, uv).unwrap());
    let terms = policy_loss(&mut g, cfg.method, logits, values, Some(&t.reference), &t.rows, cfg).unwrap();
    let l = g.value(terms.loss).item();
    let grads = g.backward(terms.loss).unwrap();
    let gw = grads.wrt(wv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; w.len()]);
    let gu = grads.wrt(uv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; u.len()]);
    (l, gw, gu)
}

fn c5() -> Outcome {
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in op_cases() {
        let e = fd_error(&inputs, &*f);
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }
    let h = 1e-5;
    let mut worst_loss = ("", 0.0f64);
    for method in Method::ALL {
        for est in [KlEstimator::Full, KlEstimator::Sampled] {
            let t = toy(3);
            let cfg = PosttrainConfig { method, kl_estimator: est, ..PosttrainConfig::default() };
            let (_, gw, gu) = toy_loss(&t, &t.w, &t.u, &cfg);
            let fd = |base: &Tensor| -> Vec<f64> {
                (0..base.len())
                    .map(|i| {
                        let (mut p, mut m) = (base.clone(), base.clone());
                        p.data[i] += h;
                        m.data[i] -= h;
                        (toy_loss(&t, &p, &t.u, &cfg).0 - toy_loss(&t, &m, &t.u, &cfg).0) / (2.0 * h)
                    })
                    .collect()
            };
            let mut e = rel_err(&gw, &fd(&t.w));
            if method == Method::A2c {
                // the critic baseline is detached in the policy term, so the
                // value head only sees the regression loss c * mean((Xu - R)^2)
                let value_loss = |u: &Tensor| {
                    (0..t.x.rows)
                        .map(|r| {
                            let v: f64 = (0..u.len()).map(|j| t.x.get(r, j) * u.data[j]).sum();
                            (v - t.rows.returns[r]).powi(2)
                        })
                        .sum::<f64>()
                        * cfg.value_coef
                        / t.x.rows as f64
                };
                let num: Vec<f64> = (0..t.u.len())
                    .map(|i| {
                        let (mut p, mut m) = (t.u.clone(), t.u.clone());
                        p.data[i] += h;
                        m.data[i] -= h;
                        (value_loss(&p) - value_loss(&m)) / (2.0 * h)
                    })
                    .collect();
                e = e.max(rel_err(&gu, &num));
            }
            if e > worst_loss.1 {
                worst_loss = (method.name(), e);
            }
        }
    }
    outcome(
        worst_op.1 < 1e-4 && worst_loss.1 < 1e-4,
        format!("{} ops, worst {} {:.2e}; post-training losses worst {} {:.2e}", op_cases().len(), worst_op.0, worst_op.1, worst_loss.0, worst_loss.1),
    )
}

// ---------------------------------------------------------------- pretraining

fn baseline_config() -> TrainConfig {
    TrainConfig { k: 8, max_steps: Some(BASELINE_STEPS), batch_size: 8, val_fraction: 0.1, other_loss_weight: 0.1, ..TrainConfig::default() }
}

const BASELINE_SCENARIOS: usize = 2000;
const BASELINE_STEPS: usize = 1500;

/// Mini model trained on the 2k-scenario corpus, with its val accuracy.
fn train_baseline() -> (PolicyModel, f64) {
    let data = corpus(&Template::ALL, BASELINE_SCENARIOS, 500_000);
    let cfg = baseline_config();
    let mut m = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let report = train(&mut m, &data, &cfg).unwrap();
    let acc = report.logs.last().and_then(|l| l.val_acc).unwrap_or(0.0);
    (m, acc)
}

fn cache_path() -> Option<PathBuf> {
    std::env::var_os("ACCEPTANCE_CACHE").map(|d| PathBuf::from(d).join(format!("baseline_{BASELINE_SCENARIOS}_{BASELINE_STEPS}.ckpt")))
}

fn baseline(shared: &mut Shared) -> &PolicyModel {
    if shared.baseline.is_none() {
        let cached = cache_path().filter(|p| p.exists()).and_then(|p| checkpoint::load(&p, "acceptance").ok()).map(|(m, _)| m);
        let m = cached.unwrap_or_else(|| {
            let (m, _) = train_baseline();
            save_cache(&m);
            m
        });
        shared.baseline = Some(m);
    }
    shared.baseline.as_ref().unwrap()
}

fn save_cache(m: &PolicyModel) {
    if let Some(p) = cache_path() {
        let _ = std::fs::create_dir_all(p.parent().unwrap());
        let _ = checkpoint::save(&p, m, "pretrain");
    }
}

fn c6(shared: &mut Shared) -> Outcome {
    let m0 = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let data = corpus(&Template::ALL, 8, 1);
    let set = build_samples(&data, &(0..8).collect::<Vec<_>>(), &[1.0, 2.5], 16);
    let init = evaluate(&m0, &data, &set.samples, 4).unwrap().loss;

    let one = corpus(&[Template::Curve], 1, 3);
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
    let r = train(&mut m, &one, &cfg).unwrap();
    let ts = build_samples(&one, &[0], &[1.0], 16);
    let overfit = evaluate(&m, &one, &ts.samples, 1).unwrap().accuracy;

    let (model, val_acc) = train_baseline();
    save_cache(&model);
    shared.baseline = Some(model);
    let random = 1.0 / VOCAB_SIZE as f64;
    outcome(
        (init - 169f64.ln()).abs() < 1e-3 && r.steps <= 200 && overfit >= 0.99 && val_acc >= 0.20,
        format!(
            "init loss {init:.6} (ln 169 = {:.6}); overfit accuracy {overfit:.3} after {} steps; mini on {BASELINE_SCENARIOS} scenarios val accuracy {val_acc:.3} (random {random:.4})",
            169f64.ln(),
            r.steps
        ),
    )
}

const SCALING_SCENARIOS: usize = 300;
const SCALING_STEPS: usize = 300;

fn c7() -> Outcome {
    let data = corpus(&Template::ALL, SCALING_SCENARIOS, 900_000);
    let base = TrainConfig { max_steps: Some(SCALING_STEPS), other_loss_weight: 0.0, val_fraction: 0.1, ..TrainConfig::default() };
    let fractions = [DataFraction::Fraction(0.1), DataFraction::Fraction(1.0), DataFraction::Augmented];
    let presets = [SizePreset::Mini, SizePreset::Medium];
    let seeds = [0u64, 1, 2];
    let rows = scaling_sweep(&data, &presets, &fractions, &seeds, &base, &mut |r| {
        eprintln!("  scaling {} {} seed {}: val loss {:.4}", r.preset.name(), r.data.label(), r.seed, r.val_loss)
    })
    .unwrap();
    let val = |p: SizePreset, f: usize, s: u64| rows.iter().find(|r| r.preset == p && r.data == fractions[f] && r.seed == s).unwrap().val_loss;
    let mut parts = Vec::new();
    let mut pass = true;
    for p in presets {
        let monotone = seeds.iter().filter(|&&s| val(p, 0, s) >= val(p, 1, s) && val(p, 1, s) >= val(p, 2, s)).count();
        let aug_beats_small = seeds.iter().filter(|&&s| val(p, 2, s) < val(p, 0, s)).count();
        pass &= monotone >= 2 && aug_beats_small == seeds.len();
        let table: Vec<String> = seeds.iter().map(|&s| format!("{:.3}/{:.3}/{:.3}", val(p, 0, s), val(p, 1, s), val(p, 2, s))).collect();
        parts.push(format!("{}: non-increasing in {monotone}/3 seeds, augmented < 10% in {aug_beats_small}/3 [{}]", p.name(), table.join(" ")));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- post-training

fn c8() -> Outcome {
    let exact = group_normalize(&[0.0, -1.0, -1.0, 0.0], 1e-6).unwrap() == vec![1.0, -1.0, -1.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for i in 0..10_000 {
        let n = rng.gen_range(2..17);
        let v: Vec<f64> = if i % 10 == 0 { vec![-0.5; n] } else { (0..n).map(|_| -0.5 * rng.gen_range(0..4) as f64 + rng.gen_range(-0.1..0.0)).collect() };
        let a = group_normalize(&v, 1e-6).unwrap();
        let m = a.iter().sum::<f64>() / n as f64;
        let s = (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(m.abs());
        if s != 0.0 {
            worst_std = worst_std.max((s - 1.0).abs());
        }
    }
    let p = Tensor::from_vec(2, 3, vec![0.2, -0.1, 1.0, 0.0, 0.5, 0.5]).unwrap();
    let (_, kl_same) = kl_terms(&p, &p, &[0, 1], &[vec![0, 1]], KlEstimator::Full).unwrap();
    let model = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let kl_model = kl_to_reference(&model, &model.clone(), &corpus(&[Template::Merge], 2, 4), 2, 8, 0).unwrap();
    let (n, mut pol) = (5, Tensor::zeros(5, 3));
    pol.data[2 * 3] = 4.0;
    let (terms, agg) = kl_terms(&pol, &Tensor::zeros(n, 3), &[0; 5], &[(0..n).collect()], KlEstimator::Full).unwrap();
    let spiked = agg == terms[2] && agg > terms.iter().sum::<f64>() / n as f64;
    outcome(
        exact && worst_mean < 1e-12 && worst_std < 1e-9 && kl_same == 0.0 && kl_model == 0.0 && spiked,
        format!("[0,-1,-1,0] -> [1,-1,-1,1]: {exact}; 10^4 groups max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}; KL at reference {kl_model}; spiked aggregate {agg:.4} = max step"),
    )
}

const HAZARD: [Template; 2] = [Template::Intersection, Template::Merge];
const EVAL_SCENARIOS: usize = 48;
const EVAL_ROLLOUTS: usize = 16;
const POST_SCENARIOS: usize = 1024;
const POST_EPOCHS: usize = 2;
/// Shared by the three RL methods; SFT keeps the usual 3x ratio.
const RL_LR: f64 = 3e-4;
const SFT_LR: f64 = 9e-4;
const LAMBDA_KL: f64 = 0.03;
const KL_BOUND: f64 = 1.0;

/// Collision and offroad rates over rollouts on the held-out hazard set.
fn hazard_rates(model: &PolicyModel, eval: &[Scenario]) -> (f64, f64) {
    let (mut c, mut o) = (0.0, 0.0);
    for (i, sc) in eval.iter().enumerate() {
        let opts = RolloutOptions { n_rollouts: EVAL_ROLLOUTS, horizon: 16, temperature: 1.0, seed: 7_000 + i as u64 };
        let mut b = model.rollout(sc, &opts).unwrap();
        score_rollouts(sc, &mut b);
        let (x, y) = failure_rates(&b);
        c += x;
        o += y;
    }
    (c / eval.len() as f64, o / eval.len() as f64)
}

fn c9(shared: &mut Shared) -> Outcome {
    let base = baseline(shared).clone();
    let train_set = corpus(&HAZARD, POST_SCENARIOS, 300_000);
    let eval = corpus(&HAZARD, EVAL_SCENARIOS, 400_000);
    let (c0, o0) = hazard_rates(&base, &eval);
    let mut parts = vec![format!("baseline collision {c0:.4} offroad {o0:.4}")];
    let mut results = Vec::new();
    for method in [Method::Grpo, Method::Reinforce, Method::A2c, Method::Sft] {
        let t = Instant::now();
        let mut m = base.clone();
        let lr = if method == Method::Sft { SFT_LR } else { RL_LR };
        let cfg = PosttrainConfig { method, lr: Some(lr), epochs: POST_EPOCHS, lambda_kl: LAMBDA_KL, seed: 17, ..PosttrainConfig::default() };
        let report = run_posttrain(&mut m, &base, &train_set, &cfg).unwrap();
        let (c, o) = hazard_rates(&m, &eval);
        let kl = kl_to_reference(&m, &base, &eval, 4, 16, 23).unwrap();
        parts.push(format!("{} collision {c:.4} offroad {o:.4} KL {kl:.4} ({} updates, {:.0}s)", method.name(), report.updates.len(), t.elapsed().as_secs_f64()));
        results.push((method, c, kl));
    }
    let get = |m: Method| *results.iter().find(|r| r.0 == m).unwrap();
    let (_, c_grpo, kl_grpo) = get(Method::Grpo);
    let grpo_ok = c0 > 0.0 && c_grpo <= 0.7 * c0 && kl_grpo < KL_BOUND;
    let rl_ok = [Method::Reinforce, Method::A2c].iter().all(|&m| get(m).1 < c0);
    let sft_change = (get(Method::Sft).1 - c0).abs();
    let sft_ok = [Method::Grpo, Method::Reinforce, Method::A2c].iter().all(|&m| sft_change < (get(m).1 - c0).abs());
    let rel = if c0 > 0.0 { 1.0 - c_grpo / c0 } else { 0.0 };
    parts.push(format!("GRPO relative reduction {:.1}% (need 30%), KL bound {KL_BOUND}", 100.0 * rel));
    outcome(grpo_ok && rl_ok && sft_ok, parts.join("; "))
}

// ---------------------------------------------------------------- test-time

fn blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.0, 0.0, 0.0], [20.0, 5.0, 2.0], [-8.0, 25.0, -4.0]];
    (0..12).map(|i| centers[i % 3].iter().map(|c| c + rng.gen_range(-2.0..2.0)).collect()).collect()
}

fn exhaustive_cost(f: &[Vec<f64>], k: usize) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = f.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let ms: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let c: f64 = f.iter().map(|p| ms.iter().map(|&m| d(p, &f[m])).fold(f64::INFINITY, f64::min)).sum();
        best = best.min(c);
    }
    best
}

const SEARCH_SCENARIOS: usize = 16;
const SEARCH_BUDGET: usize = 4096;

fn c10(shared: &mut Shared) -> Outcome {
    let mut km_ok = 0;
    let fixtures = 40;
    for seed in 0..fixtures {
        let f = if seed % 2 == 0 {
            blobs(seed)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..12).map(|_| rand_vec(&mut rng, 2)).collect()
        };
        let m = k_medoids(&f, 3, seed).unwrap();
        km_ok += ((m.cost - exhaustive_cost(&f, 3)).abs() < 1e-9) as usize;
    }

    let model = baseline(shared).clone();
    let eval = corpus(&HAZARD, SEARCH_SCENARIOS, 600_000);
    let plain = TestTimeConfig { n: 32, batch: 32, use_search: false, use_cluster: false, max_candidate_budget: SEARCH_BUDGET, seed: 5, ..TestTimeConfig::default() };
    let search = TestTimeConfig { use_search: true, ..plain.clone() };
    let clock = SystemClock::new();
    let (mut off_plain, mut off_search) = (0.0, 0.0);
    let (mut ns_plain, mut ns_search) = (0u64, 0u64);
    let (mut dirty, mut filled, mut unwarned) = (0usize, 0usize, 0usize);
    for sc in &eval {
        let a = test_time_generate(&model, sc, &plain, &clock).unwrap();
        let b = test_time_generate(&model, sc, &search, &clock).unwrap();
        off_plain += failure_rates(&a.batch).1;
        ns_plain += a.telemetry.total_ns();
        ns_search += b.telemetry.total_ns();
        // re-score with a fresh oracle instead of trusting the stored rewards
        let mut check = b.batch.clone();
        Environment::new(sc, check.horizon, 0.5).score_rollouts(&mut check);
        off_search += failure_rates(&check).1;
        if b.budget_exhausted {
            // no budget is enough for this scene; the fallback must say so
            unwarned += b.warning.is_none() as usize;
            continue;
        }
        filled += 1;
        dirty += check.rollouts.iter().filter(|r| r.rewards.iter().flatten().any(|s| s.r_collision < 0.0 || s.r_offroad < 0.0)).count();
    }
    let n = eval.len() as f64;
    let (off_plain, off_search) = (off_plain / n, off_search / n);
    outcome(
        km_ok == fixtures as usize && dirty == 0 && unwarned == 0 && 2 * filled >= eval.len() && off_search < off_plain && ns_search > ns_plain,
        format!(
            "k-medoids optimal on {km_ok}/{fixtures} fixtures; search filled {filled}/{} scenes within {SEARCH_BUDGET} candidates with {dirty} penalised rollouts, the rest fell back with a warning; offroad {off_search:.4} vs {off_plain:.4} without search; time {:.2}s vs {:.2}s",
            eval.len(),
            ns_search as f64 * 1e-9,
            ns_plain as f64 * 1e-9
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn shifted(poses: &[Vec<Pose2>], dy: f64) -> Vec<Vec<Pose2>> {
    poses.iter().map(|a| a.iter().map(|p| Pose2::new(p.x, p.y + dy, p.heading)).collect()).collect()
}

fn c11() -> Outcome {
    let model = PolicyModel::new(&ModelConfig::preset(SizePreset::Mini)).unwrap();
    let mut ade_ok = 0;
    let mut evaluations = 0;
    for (i, t) in Template::ALL.iter().cycle().take(12).enumerate() {
        let sc = generate_scenario(*t, 40 + i as u64);
        let mut b: RolloutBatch = model.rollout(&sc, &RolloutOptions { n_rollouts: 8, horizon: 16, temperature: 1.0, seed: i as u64 }).unwrap();
        score_rollouts(&sc, &mut b);
        let m = evaluate_scenario(&sc, &b, &MetricsConfig::default()).unwrap();
        evaluations += 1;
        ade_ok += (m.min_ade <= m.ade) as usize;
        let g = ground_truth_batch(&sc, 16).unwrap().rollouts[0].poses.clone();
        let mut gb = ground_truth_batch(&sc, 16).unwrap();
        let r0 = gb.rollouts[0].clone();
        gb.rollouts.clear();
        for d in [2.0, 0.4, 1.3] {
            let mut r = r0.clone();
            r.poses = shifted(&g, d);
            gb.push(r);
        }
        let (mean, min) = ade_stats(&gb.rollouts, &g).unwrap();
        evaluations += 1;
        ade_ok += (min <= mean && (min - 0.4).abs() < 1e-9) as usize;
    }

    let w = [0.2, 0.3, 0.5];
    let m = [vec![0.9, 0.5, 0.2], vec![0.4, 1.0, 0.6]];
    let hand = ((0.2 * 0.9 + 0.3 * 0.5 + 0.5 * 0.2) + (0.2 * 0.4 + 0.3 * 1.0 + 0.5 * 0.6)) / 2.0;
    let realism = realism_score(&m, &w).unwrap();
    let realism_ok = (realism - hand).abs() < 1e-12 && (realism_score(&[vec![0.8, 0.6]], &[0.75, 0.25]).unwrap() - 0.75).abs() < 1e-12;

    let mut perfect_ok = true;
    for t in Template::ALL {
        let sc = generate_scenario(t, 6);
        let mut b = ground_truth_batch(&sc, 16).unwrap();
        let r = b.rollouts[0].clone();
        for _ in 0..31 {
            b.push(r.clone());
        }
        let m = evaluate_scenario(&sc, &b, &MetricsConfig { smoothing: 0.0, ..MetricsConfig::default() }).unwrap();
        perfect_ok &= m.components.iter().all(|&c| c == 1.0);
    }
    outcome(
        ade_ok == evaluations && realism_ok && perfect_ok,
        format!("minADE <= ADE in {ade_ok}/{evaluations} evaluations; realism {realism:.6} vs hand {hand:.6}; perfect rollouts score 1: {perfect_ok}"),
    )
}

// ---------------------------------------------------------------- pipeline

const SMALL: &str = r#"
seed = 3
[generate]
count = 16
eval_count = 3
[stages]
posttrain_scenarios = 3
[model]
size_preset = "mini"
[train]
k = 2
epochs = 1
batch_size = 4
[posttrain]
group_size = 4
[testtime]
n = 4
batch = 8
max_candidate_budget = 16
"#;

fn cli_pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    let cfg = dir.join("cfg.toml");
    std::fs::write(&cfg, SMALL).map_err(|e| e.to_string())?;
    for args in [&["generate"][..], &["pretrain"], &["posttrain", "--method", "grpo"], &["rollout", "--search"], &["evaluate"]] {
        let o = Command::new(env!("CARGO_BIN_EXE_simagent")).arg("--config").arg(&cfg).arg("--dir").arg(dir.join("run")).args(args).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    std::fs::read(dir.join("run/report.json")).map_err(|e| e.to_string())
}

fn c12() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (cli_pipeline(a.path()), cli_pipeline(b.path())) {
        (Ok(x), Ok(y)) => outcome(x == y && !x.is_empty(), format!("report.json {} bytes, identical: {}", x.len(), x == y)),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    // `cargo test` passes harness flags; only a filter-free run is meaningful
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut shared = Shared::default();
    type Crit<'a> = (usize, &'a str, u64, Box<dyn Fn(&mut Shared) -> Outcome>);
    let criteria: Vec<Crit> = vec![
        (1, "tokenizer constants", 1, Box::new(|_| c1())),
        (2, "round-trip bound", 30, Box::new(|_| c2())),
        (3, "rigid-motion invariance", 30, Box::new(|_| c3())),
        (4, "rotary identities", 60, Box::new(|_| c4())),
        (5, "gradient correctness", 120, Box::new(|_| c5())),
        (6, "pretraining sanity", 900, Box::new(c6)),
        (7, "scaling trend", 3600, Box::new(|_| c7())),
        (8, "advantage algebra", 1, Box::new(|_| c8())),
        (9, "post-training efficacy", 1800, Box::new(c9)),
        (10, "test-time search", 600, Box::new(c10)),
        (11, "metrics algebra", 60, Box::new(|_| c11())),
        (12, "end-to-end determinism", 600, Box::new(|_| c12())),
    ];
    let (mut passed, mut ran) = (0, 0);
    for (id, name, budget, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let out = f(&mut shared);
        let el = t.elapsed();
        let in_time = el <= Duration::from_secs(*budget);
        let ok = out.pass && in_time;
        ran += 1;
        passed += ok as usize;
        let timing = if in_time { format!("{:.1}s", el.as_secs_f64()) } else { format!("{:.1}s, over the {budget}s budget", el.as_secs_f64()) };
        println!("{} C{id:<2} {name} ({timing}): {}", if ok { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if strict && passed < ran {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
