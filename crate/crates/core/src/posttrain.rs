//! Reward-driven fine-tuning: SFT on collision cases, REINFORCE, advantage
//! actor-critic and group-relative policy optimization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Adam, AutodiffError, Graph, Tensor, Var};
use crate::environment::{Environment, RolloutBatch};
use crate::math;
use crate::metrics::failure_rates;
use crate::model::{build_scene_input, AgentTrace, ModelError, PolicyModel, RolloutOptions, SceneInput};
use crate::pretrain::{self, SampleSet, TrainConfig, TrainError, TrainSample};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PosttrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("group needs at least 2 members, got {0}")]
    GroupSize(usize),
    #[error("{0}")]
    MethodMismatch(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("invalid posttrain config: {0}")]
    Config(&'static str),
}

type Result<T> = core::result::Result<T, PosttrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Reinforce,
    A2c,
    Grpo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sft, Method::Reinforce, Method::A2c, Method::Grpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Reinforce => "reinforce",
            Method::A2c => "a2c",
            Method::Grpo => "grpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// KL over the whole next-token distribution.
    Full,
    /// `p(a) * log(p(a) / p_ref(a))` at the sampled action only.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosttrainConfig {
    pub method: Method,
    pub gamma: f64,
    pub lambda_kl: f64,
    pub lambda_h: f64,
    /// Rollouts per initial state.
    pub group_size: usize,
    /// Defaults to 1e-5, or 3e-5 for SFT.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub std_floor: f64,
    pub kl_estimator: KlEstimator,
    pub temperature: f64,
    pub horizon: usize,
    pub collision_weight: f64,
    pub value_coef: f64,
    pub scenarios_per_update: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        PosttrainConfig {
            method: Method::Grpo,
            gamma: 0.5,
            lambda_kl: 0.8,
            lambda_h: 0.01,
            group_size: 8,
            lr: None,
            epochs: 1,
            std_floor: 1e-6,
            kl_estimator: KlEstimator::Full,
            temperature: 1.0,
            horizon: 16,
            collision_weight: 0.5,
            value_coef: 0.5,
            scenarios_per_update: 1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl PosttrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.method == Method::Sft { 3e-5 } else { 1e-5 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PosttrainError::Config("gamma must lie in (0, 1]"));
        }
        if self.lambda_kl < 0.0 || self.lambda_h < 0.0 || self.value_coef < 0.0 {
            return Err(PosttrainError::Config("loss weights must be non-negative"));
        }
        if self.group_size == 0 || self.horizon == 0 || self.scenarios_per_update == 0 {
            return Err(PosttrainError::Config("group_size, horizon and scenarios_per_update must be positive"));
        }
        if self.method == Method::Grpo && self.group_size < 2 {
            return Err(PosttrainError::GroupSize(self.group_size));
        }
        Ok(())
    }
}

/// `R_t = sum_{k >= t} gamma^(k - t) r_k`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `(r - mean) / std` with the population std; all zeros when std < `eps`.
pub fn group_normalize(returns: &[f64], eps: f64) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(PosttrainError::GroupSize(returns.len()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    if std < eps {
        return Ok(vec![0.0; returns.len()]);
    }
    Ok(returns.iter().map(|r| (r - mean) / std).collect())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = math::log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Entropy of `softmax(logits)`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax_row(logits).iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { -math::exp(l) * l }).sum()
}

/// Per-row KL terms and their aggregate: the mean over sequences of the
/// maximum over each sequence's steps. `sequences` lists row indices.
pub fn kl_terms(policy: &Tensor, reference: &Tensor, actions: &[usize], sequences: &[Vec<usize>], estimator: KlEstimator) -> Result<(Vec<f64>, f64)> {
    if policy.shape() != reference.shape() || actions.len() != policy.rows {
        return Err(PosttrainError::Shape("policy, reference and actions must align"));
    }
    let terms: Vec<f64> = (0..policy.rows)
        .map(|r| {
            let lp = log_softmax_row(policy.row(r));
            let lq = log_softmax_row(reference.row(r));
            match estimator {
                KlEstimator::Full => lp.iter().zip(&lq).map(|(a, b)| math::exp(*a) * (a - b)).sum(),
                KlEstimator::Sampled => {
                    let a = actions[r];
                    math::exp(lp[a]) * (lp[a] - lq[a])
                }
            }
        })
        .collect();
    let agg = sequences.iter().map(|s| s.iter().map(|&r| terms[r]).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / sequences.len().max(1) as f64;
    Ok((terms, agg))
}

/// Per-row training inputs of a policy loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossRows {
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Row indices of each (rollout, agent) sequence, in time order.
    pub sequences: Vec<Vec<usize>>,
}

pub struct LossTerms {
    pub loss: Var,
    pub policy: f64,
    pub kl: f64,
    pub entropy: f64,
    pub value: f64,
}

/// Differentiable loss of one method over rows of `logits`.
///
/// * SFT: mean NLL of `actions`.
/// * REINFORCE: `-mean(R_t log p(a_t))`.
/// * A2C: `-mean((R_t - V_t) log p(a_t)) + c * mean((V_t - R_t)^2)`, V detached
///   in the policy term.
/// * GRPO: `-mean(A log p(a)) + lambda_kl * L_kl - lambda_h * H`.
pub fn policy_loss(
    g: &mut Graph,
    method: Method,
    logits: Var,
    values: Option<Var>,
    reference: Option<&Tensor>,
    rows: &LossRows,
    cfg: &PosttrainConfig,
) -> Result<LossTerms> {
    let [n, _] = g.shape(logits);
    if rows.actions.len() != n || rows.advantages.len() != n || rows.returns.len() != n {
        return Err(PosttrainError::Shape("loss rows must match logits"));
    }
    let inv = 1.0 / n.max(1) as f64;
    let weights: Vec<f64> = match method {
        Method::Sft => vec![inv; n],
        Method::Reinforce | Method::Grpo => rows.advantages.iter().map(|a| a * inv).collect(),
        Method::A2c => {
            let v = values.ok_or(PosttrainError::MethodMismatch("a2c needs value estimates"))?;
            let vt = g.value(v);
            rows.returns.iter().enumerate().map(|(k, r)| (r - vt.data[k]) * inv).collect()
        }
    };
    // sum_k w_k * (-log p(a_k))
    let mut loss = g.cross_entropy(logits, &rows.actions, &weights)?;
    let policy = g.value(loss).item();
    let mut out = LossTerms { loss, policy, kl: 0.0, entropy: 0.0, value: 0.0 };
    if method == Method::A2c {
        let v = values.expect("checked above");
        let r = g.constant(Tensor::from_vec(n, 1, rows.returns.clone())?);
        let d = g.sub(v, r)?;
        let sq = g.mul(d, d)?;
        let m = g.reduce_mean(sq);
        out.value = g.value(m).item();
        let m = g.scale(m, cfg.value_coef);
        loss = g.add(loss, m)?;
    }
    if method == Method::Grpo {
        let p = g.softmax(logits);
        let lp = g.log_softmax(logits);
        let plp = g.mul(p, lp)?;
        let ent_rows = g.row_sum(plp);
        let neg_h = g.reduce_mean(ent_rows);
        out.entropy = -g.value(neg_h).item();
        let bonus = g.scale(neg_h, cfg.lambda_h);
        loss = g.add(loss, bonus)?;
        if cfg.lambda_kl > 0.0 {
            let reference = reference.ok_or(PosttrainError::MethodMismatch("grpo needs reference logits"))?;
            let ref_lp = Tensor {
                rows: reference.rows,
                cols: reference.cols,
                data: (0..reference.rows).flat_map(|r| log_softmax_row(reference.row(r))).collect(),
            };
            let kl_rows = match cfg.kl_estimator {
                KlEstimator::Full => {
                    let q = g.constant(ref_lp);
                    let d = g.sub(lp, q)?;
                    let pd = g.mul(p, d)?;
                    g.row_sum(pd)
                }
                KlEstimator::Sampled => {
                    let pa = g.pick(p, &rows.actions)?;
                    let la = g.pick(lp, &rows.actions)?;
                    let qa: Vec<f64> = rows.actions.iter().enumerate().map(|(k, &a)| ref_lp.data[k * ref_lp.cols + a]).collect();
                    let qa = g.constant(Tensor::from_vec(n, 1, qa)?);
                    let d = g.sub(la, qa)?;
                    g.mul(pa, d)?
                }
            };
            let order: Vec<usize> = rows.sequences.iter().flatten().copied().collect();
            let mut offsets = vec![0];
            for s in &rows.sequences {
                offsets.push(offsets.last().unwrap() + s.len());
            }
            let ordered = g.gather_rows(kl_rows, &order)?;
            let peaks = g.segment_max(ordered, &offsets)?;
            let l_kl = g.reduce_mean(peaks);
            out.kl = g.value(l_kl).item();
            let w = g.scale(l_kl, cfg.lambda_kl);
            loss = g.add(loss, w)?;
        }
    }
    out.loss = loss;
    Ok(out)
}

/// Returns and advantages indexed `[rollout][agent][step]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub returns: Vec<Vec<Vec<f64>>>,
    pub advantages: Vec<Vec<Vec<f64>>>,
}

/// Per-agent discounted returns of the combined reward; GRPO normalizes them
/// across the rollouts of the group at each (agent, step). A2C baselines are
/// applied inside the loss.
pub fn advantage_table(method: Method, batch: &RolloutBatch, cfg: &PosttrainConfig) -> Result<AdvantageTable> {
    let returns: Vec<Vec<Vec<f64>>> = batch
        .rollouts
        .iter()
        .map(|r| r.rewards.iter().map(|per| discounted_returns(&per.iter().map(|s| s.combined).collect::<Vec<_>>(), cfg.gamma)).collect())
        .collect();
    let advantages = match method {
        Method::Grpo => {
            let mut adv = returns.clone();
            let n_agents = batch.agent_ids.len();
            for a in 0..n_agents {
                for t in 0..batch.horizon {
                    let col: Vec<f64> = returns.iter().map(|r| r[a][t]).collect();
                    for (r, v) in group_normalize(&col, cfg.std_floor)?.into_iter().enumerate() {
                        adv[r][a][t] = v;
                    }
                }
            }
            adv
        }
        _ => returns.clone(),
    };
    Ok(AdvantageTable { returns, advantages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub loss: f64,
    pub policy: f64,
    pub kl: f64,
    pub entropy: f64,
    pub value: f64,
    pub mean_reward: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosttrainReport {
    pub method: Method,
    pub updates: Vec<UpdateLog>,
    /// Largest aggregate KL seen during updates.
    pub max_kl: f64,
    /// Scenarios selected for SFT.
    pub sft_scenarios: Option<usize>,
    pub warning: Option<String>,
}

fn scenario_seed(base: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ ((epoch as u64) << 32) ^ index as u64);
    rng.gen()
}

struct Scored {
    scene: SceneInput,
    traces: Vec<AgentTrace>,
    batch: RolloutBatch,
    table: AdvantageTable,
}

fn sample_group(model: &PolicyModel, scenario: &Scenario, cfg: &PosttrainConfig, seed: u64) -> Result<Scored> {
    let opts = RolloutOptions { n_rollouts: cfg.group_size, horizon: cfg.horizon, temperature: cfg.temperature, seed };
    let mut batch = model.rollout(scenario, &opts)?;
    Environment::new(scenario, cfg.horizon, cfg.collision_weight).score_rollouts(&mut batch);
    let table = advantage_table(cfg.method, &batch, cfg)?;
    let scene = build_scene_input(scenario, scenario.anchor_time, &model.config)?;
    let traces = model.rollout_traces(scenario, &batch)?;
    Ok(Scored { scene, traces, batch, table })
}

/// Loss rows for a batched forward over scored groups.
fn rows_for(groups: &[Scored], rows: &[crate::model::RowRef]) -> LossRows {
    let mut out = LossRows::default();
    let mut seq_index = alloc::collections::BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        let s = &groups[r.sample];
        let n_agents = s.batch.agent_ids.len();
        let (ro, a) = (r.trace / n_agents, r.trace % n_agents);
        out.actions.push(s.batch.rollouts[ro].tokens[a][r.step].index());
        out.advantages.push(s.table.advantages[ro][a][r.step]);
        out.returns.push(s.table.returns[ro][a][r.step]);
        let id = *seq_index.entry((r.sample, r.trace)).or_insert_with(|| {
            out.sequences.push(Vec::new());
            out.sequences.len() - 1
        });
        out.sequences[id].push(k);
    }
    out
}

/// Fine-tunes `model` in place. `reference` is the frozen pretrained policy.
pub fn run_posttrain(model: &mut PolicyModel, reference: &PolicyModel, scenarios: &[Scenario], cfg: &PosttrainConfig) -> Result<PosttrainReport> {
    cfg.validate()?;
    if cfg.method == Method::Sft {
        return run_sft(model, scenarios, cfg);
    }
    let mut opt = Adam::new(&model.params);
    let lr = cfg.learning_rate();
    let mut report = PosttrainReport { method: cfg.method, updates: vec![], max_kl: 0.0, sft_scenarios: None, warning: None };
    let order: Vec<usize> = (0..scenarios.len()).collect();
    for epoch in 0..cfg.epochs {
        for chunk in order.chunks(cfg.scenarios_per_update) {
            let groups = chunk
                .iter()
                .map(|&i| sample_group(model, &scenarios[i], cfg, scenario_seed(cfg.seed, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(&SceneInput, &[AgentTrace])> = groups.iter().map(|s| (&s.scene, &s.traces[..])).collect();
            let ref_logits = if cfg.method == Method::Grpo && cfg.lambda_kl > 0.0 {
                let mut rg = Graph::inference();
                let out = reference.forward(&mut rg, &pairs)?;
                Some(rg.value(out.logits).clone())
            } else {
                None
            };
            let mut g = Graph::new();
            let out = model.forward(&mut g, &pairs)?;
            let values = if cfg.method == Method::A2c { Some(model.values(&mut g, out.hidden)?) } else { None };
            let rows = rows_for(&groups, &out.rows);
            let terms = policy_loss(&mut g, cfg.method, out.logits, values, ref_logits.as_ref(), &rows, cfg)?;
            let loss = g.value(terms.loss).item();
            let mut grads = g.backward(terms.loss)?.param_grads(&model.params);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            opt.update(&mut model.params, &grads, lr);

            let (mut cr, mut or, mut rew) = (0.0, 0.0, 0.0);
            let mut n_rew = 0usize;
            for s in &groups {
                let (c, o) = failure_rates(&s.batch);
                cr += c;
                or += o;
                for r in &s.batch.rollouts {
                    for per in &r.rewards {
                        rew += per.iter().map(|x| x.combined).sum::<f64>();
                        n_rew += per.len();
                    }
                }
            }
            let ng = groups.len() as f64;
            report.max_kl = report.max_kl.max(terms.kl);
            report.updates.push(UpdateLog {
                update: report.updates.len(),
                loss,
                policy: terms.policy,
                kl: terms.kl,
                entropy: terms.entropy,
                value: terms.value,
                mean_reward: rew / n_rew.max(1) as f64,
                collision_rate: cr / ng,
                offroad_rate: or / ng,
            });
        }
    }
    Ok(report)
}

/// Selects scenarios where any sampled rollout collides, then fine-tunes on
/// their recorded futures with teacher forcing.
fn run_sft(model: &mut PolicyModel, scenarios: &[Scenario], cfg: &PosttrainConfig) -> Result<PosttrainReport> {
    let mut picked = Vec::new();
    for (i, sc) in scenarios.iter().enumerate() {
        let s = sample_group(model, sc, cfg, scenario_seed(cfg.seed, 0, i))?;
        if s.batch.rollouts.iter().any(|r| r.collided()) {
            picked.push(i);
        }
    }
    let mut report = PosttrainReport { method: Method::Sft, updates: vec![], max_kl: 0.0, sft_scenarios: Some(picked.len()), warning: None };
    if picked.is_empty() {
        report.warning = Some("no collision cases found; model unchanged".into());
        return Ok(report);
    }
    let lr = cfg.learning_rate();
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        max_steps: None,
        lr_max: lr,
        lr_min: lr,
        batch_size: cfg.scenarios_per_update,
        seed: cfg.seed,
        horizon: cfg.horizon,
        grad_clip: cfg.grad_clip,
        other_loss_weight: 0.0,
        ..TrainConfig::default()
    };
    let samples: Vec<TrainSample> = picked
        .iter()
        .map(|&i| {
            let sc = &scenarios[i];
            TrainSample { scenario: i, anchor: sc.anchor_time, n_future: crate::model::available_steps(sc, sc.anchor_time, cfg.horizon) }
        })
        .collect();
    let train = SampleSet { samples, skipped: 0 };
    let r = pretrain::train_on(model, scenarios, &train, &SampleSet::default(), &tcfg, &mut |_| {})?;
    for l in &r.logs {
        report.updates.push(UpdateLog {
            update: l.step,
            loss: l.train_loss,
            policy: l.train_loss,
            kl: 0.0,
            entropy: 0.0,
            value: 0.0,
            mean_reward: 0.0,
            collision_rate: 0.0,
            offroad_rate: 0.0,
        });
    }
    Ok(report)
}

/// Aggregate full-distribution KL between `model` and `reference` on
/// rollouts sampled from `model`.
pub fn kl_to_reference(model: &PolicyModel, reference: &PolicyModel, scenarios: &[Scenario], n_rollouts: usize, horizon: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, sc) in scenarios.iter().enumerate() {
        let opts = RolloutOptions { n_rollouts, horizon, temperature: 1.0, seed: scenario_seed(seed, 0, i) };
        let batch = model.rollout(sc, &opts)?;
        let scene = build_scene_input(sc, sc.anchor_time, &model.config)?;
        let traces = model.rollout_traces(sc, &batch)?;
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &[(&scene, &traces)])?;
        let mut rg = Graph::inference();
        let rout = reference.forward(&mut rg, &[(&scene, &traces)])?;
        let n_agents = batch.agent_ids.len();
        let actions: Vec<usize> = out.rows.iter().map(|r| batch.rollouts[r.trace / n_agents].tokens[r.trace % n_agents][r.step].index()).collect();
        let mut seqs = vec![Vec::new(); traces.len()];
        for (k, r) in out.rows.iter().enumerate() {
            seqs[r.trace].push(k);
        }
        total += kl_terms(g.value(out.logits), rg.value(rout.logits), &actions, &seqs, KlEstimator::Full)?.1;
    }
    Ok(total / scenarios.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_examples() {
        assert_eq!(discounted_returns(&[0.0, 0.0, -1.0], 0.5), vec![-0.25, -0.5, -1.0]);
        assert_eq!(discounted_returns(&[0.0; 4], 0.5), vec![0.0; 4]);
        assert_eq!(discounted_returns(&[-1.0, -1.0], 1.0), vec![-2.0, -1.0]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(group_normalize(&[0.0, -1.0, -1.0, 0.0], 1e-6).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_normalize(&[-0.3; 5], 1e-6).unwrap(), vec![0.0; 5]);
        assert!(group_normalize(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn uniform_entropy() {
        assert!((entropy(&[0.0; 169]) - 169f64.ln()).abs() < 1e-12);
        let mut sharp = [0.0; 4];
        sharp[0] = 800.0;
        assert!(entropy(&sharp) >= 0.0 && entropy(&sharp) < 1e-12);
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(PosttrainConfig { method: Method::Sft, ..Default::default() }.learning_rate(), 3e-5);
        assert_eq!(PosttrainConfig::default().learning_rate(), 1e-5);
    }
}
