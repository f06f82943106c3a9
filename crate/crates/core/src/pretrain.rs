//! Next-token pretraining with sliding-anchor augmentation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Adam, AutodiffError, Graph, Tensor, Var};
use crate::math;
use crate::model::{available_steps, build_scene_input, ground_truth_traces, AgentTrace, ModelError, PolicyModel, SceneInput, OTHER_HORIZON};
use crate::scenario::{Scenario, NATIVE_DT};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("target {0} outside the vocabulary")]
    BadTarget(usize),
    #[error("invalid train config: {0}")]
    Config(&'static str),
    #[error("no training samples")]
    Empty,
}

type Result<T> = core::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFraction {
    /// Seeded subset of the training scenarios, base anchor only.
    Fraction(f64),
    /// Every training scenario at all `k` anchors.
    Augmented,
}

impl DataFraction {
    pub fn label(&self) -> alloc::string::String {
        match self {
            DataFraction::Fraction(f) => alloc::format!("{:.0}%", f * 100.0),
            DataFraction::Augmented => "augmented".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub anchor_base: f64,
    pub anchor_interval: f64,
    pub k: usize,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_fraction: DataFraction,
    pub val_fraction: f64,
    pub horizon: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Weight of the non-interest trajectory regression loss.
    pub other_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            anchor_base: 1.0,
            anchor_interval: 0.5,
            k: 8,
            epochs: 4,
            max_steps: None,
            lr_max: 1e-3,
            lr_min: 1e-5,
            batch_size: 8,
            seed: 0,
            data_fraction: DataFraction::Augmented,
            val_fraction: 0.1,
            horizon: 16,
            grad_clip: 1.0,
            weight_decay: 0.0,
            other_loss_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TrainError::Config("k must be at least 1"));
        }
        if self.batch_size == 0 || self.horizon == 0 {
            return Err(TrainError::Config("batch_size and horizon must be positive"));
        }
        if let DataFraction::Fraction(f) = self.data_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(TrainError::Config("data fraction must lie in (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config("val_fraction must lie in [0, 1)"));
        }
        if self.lr_min > self.lr_max || self.lr_min < 0.0 {
            return Err(TrainError::Config("need 0 <= lr_min <= lr_max"));
        }
        Ok(())
    }

    /// Anchors used for training samples.
    pub fn anchors(&self) -> Vec<f64> {
        let k = match self.data_fraction {
            DataFraction::Augmented => self.k,
            DataFraction::Fraction(_) => 1,
        };
        (0..k).map(|i| self.anchor_base + self.anchor_interval * i as f64).collect()
    }

    /// Cosine decay from `lr_max` at step 0 to `lr_min` at `total - 1`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr_max;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math::cos(math::PI * t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub scenario: usize,
    pub anchor: f64,
    pub n_future: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub samples: Vec<TrainSample>,
    /// (scenario, anchor) pairs dropped for lack of history or future.
    pub skipped: usize,
}

/// Seeded scenario-level split into (train, val) indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_val = math::floor(n as f64 * val_fraction + 0.5) as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Deterministic subset of `ids` of the given fraction.
pub fn subset(ids: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let n = (math::ceil(ids.len() as f64 * fraction) as usize).clamp(1.min(ids.len()), ids.len());
    v.truncate(n);
    v.sort_unstable();
    v
}

fn has_history(scenario: &Scenario, anchor: f64) -> bool {
    let step = math::floor(anchor / NATIVE_DT + 0.5) as usize;
    step >= 10 && scenario.interest_indices().iter().all(|&i| (step - 10..=step).all(|s| scenario.agents[i].pose_at_step(s).is_some()))
}

/// One sample per (scenario, anchor) with enough history and at least one
/// future step; targets shorten at later anchors.
pub fn build_samples(dataset: &[Scenario], ids: &[usize], anchors: &[f64], horizon: usize) -> SampleSet {
    let mut out = SampleSet::default();
    for &s in ids {
        for &a in anchors {
            let n_future = available_steps(&dataset[s], a, horizon);
            let ok = n_future > 0
                && has_history(&dataset[s], a)
                && dataset[s].interest_indices().iter().all(|&i| {
                    let t = &dataset[s].agents[i];
                    let last = math::floor((a + 0.5 * n_future as f64) / NATIVE_DT + 0.5) as usize;
                    (math::floor((a - 1.0) / NATIVE_DT + 0.5) as usize..=last).all(|k| t.pose_at_step(k).is_some())
                });
            if ok {
                out.samples.push(TrainSample { scenario: s, anchor: a, n_future });
            } else {
                out.skipped += 1;
            }
        }
    }
    out
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn nll_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows {
        return Err(AutodiffError::Shape { op: "nll_loss", a: logits.shape(), b: [targets.len(), 1] }.into());
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(TrainError::BadTarget(t));
        }
        let row = logits.row(r);
        total += math::log_sum_exp(row) - row[t];
    }
    Ok(total / targets.len().max(1) as f64)
}

/// Index of the largest entry, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Everything the model needs for one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub scene: SceneInput,
    pub traces: Vec<AgentTrace>,
    /// Target per trace per step.
    pub targets: Vec<Vec<usize>>,
    /// Other-agent future offsets (scaled) and validity mask, `n_others x 32`.
    pub other_targets: Vec<f64>,
    pub other_mask: Vec<f64>,
}

pub fn prepare_sample(model: &PolicyModel, scenario: &Scenario, anchor: f64, n_future: usize) -> Result<PreparedSample> {
    let scene = build_scene_input(scenario, anchor, &model.config)?;
    let (traces, targets) = ground_truth_traces(scenario, anchor, n_future, &model.tokenizer)?;
    let mut other_targets = Vec::with_capacity(scene.others.len() * 2 * OTHER_HORIZON);
    let mut other_mask = Vec::with_capacity(other_targets.capacity());
    for &o in &scene.others {
        let frame = scene.agent_world[o];
        let track = scenario.agent(scene.agent_ids[o]).expect("agent in scene");
        for t in 0..OTHER_HORIZON {
            let step = math::floor((anchor + 0.5 * (t + 1) as f64) / NATIVE_DT + 0.5) as usize;
            match track.pose_at_step(step) {
                Some(p) => {
                    let rel = frame.relative(&p);
                    other_targets.extend([rel.x * 0.1, rel.y * 0.1]);
                    other_mask.extend([1.0, 1.0]);
                }
                None => {
                    other_targets.extend([0.0, 0.0]);
                    other_mask.extend([0.0, 0.0]);
                }
            }
        }
    }
    Ok(PreparedSample { scene, traces, targets, other_targets, other_mask })
}

/// Loss terms of one batch pass.
pub struct BatchLoss {
    pub loss: Var,
    pub nll: f64,
    pub correct: usize,
    pub count: usize,
}

/// Builds the teacher-forced loss of a batch: mean NLL over all (agent, step)
/// positions plus the weighted other-agent regression term.
pub fn batch_loss(model: &PolicyModel, g: &mut Graph, batch: &[PreparedSample], other_weight: f64) -> Result<BatchLoss> {
    let pairs: Vec<(&SceneInput, &[AgentTrace])> = batch.iter().map(|s| (&s.scene, &s.traces[..])).collect();
    let (out, other, _) = if other_weight > 0.0 {
        let (o, p, b) = model.forward_with_others(g, &pairs)?;
        (o, Some(p), b)
    } else {
        (model.forward(g, &pairs)?, None, vec![])
    };
    let targets: Vec<usize> = out.rows.iter().map(|r| batch[r.sample].targets[r.trace][r.step]).collect();
    let count = targets.len();
    let w = vec![1.0 / count as f64; count];
    let mut loss = g.cross_entropy(out.logits, &targets, &w)?;
    let nll = g.value(loss).item();
    let lt = g.value(out.logits);
    let correct = targets.iter().enumerate().filter(|(r, &t)| argmax(lt.row(*r)) == t).count();
    if let Some(pred) = other {
        let tgt: Vec<f64> = batch.iter().flat_map(|s| s.other_targets.iter().copied()).collect();
        let mask: Vec<f64> = batch.iter().flat_map(|s| s.other_mask.iter().copied()).collect();
        let n_valid: f64 = mask.iter().sum();
        if n_valid > 0.0 {
            let rows = tgt.len() / (2 * OTHER_HORIZON);
            let t = g.constant(Tensor::from_vec(rows, 2 * OTHER_HORIZON, tgt)?);
            let m = g.constant(Tensor::from_vec(rows, 2 * OTHER_HORIZON, mask)?);
            let d = g.sub(pred, t)?;
            let d = g.mul(d, m)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq);
            let s = g.scale(s, other_weight / n_valid);
            loss = g.add(loss, s)?;
        }
    }
    Ok(BatchLoss { loss, nll, correct, count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

/// Teacher-forced NLL and token accuracy over samples.
pub fn evaluate(model: &PolicyModel, dataset: &[Scenario], samples: &[TrainSample], batch_size: usize) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut correct = 0;
    let mut count = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let prepared = chunk.iter().map(|s| prepare_sample(model, &dataset[s.scenario], s.anchor, s.n_future)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let bl = batch_loss(model, &mut g, &prepared, 0.0)?;
        total += bl.nll * bl.count as f64;
        correct += bl.correct;
        count += bl.count;
    }
    if count == 0 {
        return Err(TrainError::Empty);
    }
    Ok(EvalResult { loss: total / count as f64, accuracy: correct as f64 / count as f64, tokens: count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub skipped: usize,
    pub steps: usize,
}

/// Train and validation samples for a config: the val set always uses the
/// base anchor only so runs with different augmentation stay comparable.
pub fn plan_samples(dataset: &[Scenario], cfg: &TrainConfig) -> (SampleSet, SampleSet) {
    let (train_ids, val_ids) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let train_ids = match cfg.data_fraction {
        DataFraction::Fraction(f) => subset(&train_ids, f, cfg.seed),
        DataFraction::Augmented => train_ids,
    };
    let train = build_samples(dataset, &train_ids, &cfg.anchors(), cfg.horizon);
    let val = build_samples(dataset, &val_ids, &[cfg.anchor_base], cfg.horizon);
    (train, val)
}

/// Trains in place, calling `on_epoch` after each epoch.
pub fn train_with(model: &mut PolicyModel, dataset: &[Scenario], cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainReport> {
    cfg.validate()?;
    let (train, val) = plan_samples(dataset, cfg);
    train_on(model, dataset, &train, &val, cfg, on_epoch)
}

pub fn train(model: &mut PolicyModel, dataset: &[Scenario], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, dataset, cfg, &mut |_| {})
}

/// Trains on explicit sample sets.
pub fn train_on(
    model: &mut PolicyModel,
    dataset: &[Scenario],
    train: &SampleSet,
    val: &SampleSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train.samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let per_epoch = train.samples.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(per_epoch * cfg.epochs);
    let mut opt = Adam::new(&model.params);
    opt.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut logs = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut correct, mut count) = (0.0, 0, 0);
        let mut lr = cfg.lr_max;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let prepared = chunk
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    prepare_sample(model, &dataset[s.scenario], s.anchor, s.n_future)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let bl = batch_loss(model, &mut g, &prepared, cfg.other_loss_weight)?;
            let mut grads = g.backward(bl.loss)?.param_grads(&model.params);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            lr = cfg.lr_at(step, total);
            opt.update(&mut model.params, &grads, lr);
            sum_loss += bl.nll * bl.count as f64;
            correct += bl.correct;
            count += bl.count;
            step += 1;
        }
        let (val_loss, val_acc) = if val.samples.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, dataset, &val.samples, cfg.batch_size)?;
            (Some(r.loss), Some(r.accuracy))
        };
        let log = EpochLog {
            epoch,
            step,
            lr,
            train_loss: sum_loss / count.max(1) as f64,
            train_acc: correct as f64 / count.max(1) as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&log);
        logs.push(log);
        epoch += 1;
    }
    Ok(TrainReport { logs, train_samples: train.samples.len(), val_samples: val.samples.len(), skipped: train.skipped + val.skipped, steps: step })
}

/// One cell of the model-size by data-fraction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub preset: crate::model::SizePreset,
    pub params: usize,
    pub data: DataFraction,
    pub seed: u64,
    pub train_samples: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Trains every (preset, data fraction) pair for each seed under the same
/// optimizer step budget and evaluates on a shared base-anchor val split.
pub fn scaling_sweep(
    dataset: &[Scenario],
    presets: &[crate::model::SizePreset],
    fractions: &[DataFraction],
    seeds: &[u64],
    base: &TrainConfig,
    on_row: &mut dyn FnMut(&ScalingRow),
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &preset in presets {
            for &data in fractions {
                let cfg = TrainConfig { seed, data_fraction: data, ..base.clone() };
                cfg.validate()?;
                let mut mc = crate::model::ModelConfig::preset(preset);
                mc.init_seed = seed;
                let mut model = PolicyModel::new(&mc)?;
                let (train, val) = plan_samples(dataset, &cfg);
                let report = train_on(&mut model, dataset, &train, &SampleSet::default(), &cfg, &mut |_| {})?;
                let v = evaluate(&model, dataset, &val.samples, cfg.batch_size)?;
                let last = report.logs.last().ok_or(TrainError::Empty)?;
                let row = ScalingRow {
                    preset,
                    params: model.num_params(),
                    data,
                    seed,
                    train_samples: report.train_samples,
                    steps: report.steps,
                    train_loss: last.train_loss,
                    train_acc: last.train_acc,
                    val_loss: v.loss,
                    val_acc: v.accuracy,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_follow_interval() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.anchors(), vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]);
        let one = TrainConfig { k: 1, ..cfg.clone() };
        assert_eq!(one.anchors(), vec![1.0]);
        let frac = TrainConfig { data_fraction: DataFraction::Fraction(0.1), ..cfg };
        assert_eq!(frac.anchors(), vec![1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 100), 1e-3);
        assert!((cfg.lr_at(99, 100) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at(50, 101) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn nll_examples() {
        let uniform = Tensor::zeros(2, 169);
        assert!((nll_loss(&uniform, &[0, 168]).unwrap() - 169f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(1, 169);
        sharp.data[5] = 60.0;
        assert!(nll_loss(&sharp, &[5]).unwrap() < 1e-20);
        // by hand: logits (1, 2, 3), target 0 -> ln(e + e^2 + e^3) - 1
        let small = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!((nll_loss(&small, &[0]).unwrap() - 2.40760596444438).abs() < 1e-12);
        assert!(nll_loss(&small, &[3]).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_eq!(split_indices(50, 0.1, 3), (a, b));
        let s = subset(&(0..100).collect::<Vec<_>>(), 0.1, 4);
        assert_eq!(s.len(), 10);
        assert_eq!(s, subset(&(0..100).collect::<Vec<_>>(), 0.1, 4));
    }
}
