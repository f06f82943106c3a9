//! Displacement errors, failure rates, histogram likelihoods of motion and
//! map features, and the weighted realism score.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::environment::{ground_truth_batch, Environment, Rollout, RolloutBatch, StepReward, STEP_DT};
use crate::geometry::{Polyline, Pose2};
use crate::math;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("horizon mismatch: {0} vs {1}")]
    Horizon(usize, usize),
    #[error("histogram has no samples")]
    EmptyHistogram,
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("weight count {0} does not match component count {1}")]
    WeightCount(usize, usize),
    #[error("no rollouts")]
    NoRollouts,
    #[error("scenario lacks a recorded future over the horizon")]
    NoGroundTruth,
}

type Result<T> = core::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LinearSpeed,
    LinearAccel,
    AngularSpeed,
    AngularAccel,
    CollisionIndicator,
    OffroadIndicator,
    DistToRoadEdge,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::LinearSpeed,
        Component::LinearAccel,
        Component::AngularSpeed,
        Component::AngularAccel,
        Component::CollisionIndicator,
        Component::OffroadIndicator,
        Component::DistToRoadEdge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::LinearSpeed => "linear_speed",
            Component::LinearAccel => "linear_accel",
            Component::AngularSpeed => "angular_speed",
            Component::AngularAccel => "angular_accel",
            Component::CollisionIndicator => "collision_indicator",
            Component::OffroadIndicator => "offroad_indicator",
            Component::DistToRoadEdge => "dist_to_road_edge",
        }
    }

    /// Histogram range and bin count.
    pub fn bins(self) -> (f64, f64, usize) {
        match self {
            Component::LinearSpeed => (0.0, 30.0, 20),
            Component::LinearAccel => (-10.0, 10.0, 20),
            Component::AngularSpeed => (-1.5, 1.5, 20),
            Component::AngularAccel => (-3.0, 3.0, 20),
            Component::CollisionIndicator | Component::OffroadIndicator => (-0.5, 1.5, 2),
            Component::DistToRoadEdge => (0.0, 20.0, 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Additive probability mass spread uniformly over the bins.
    pub smoothing: f64,
    /// One weight per entry of `Component::ALL`.
    pub weights: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let raw = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0];
        let s: f64 = raw.iter().sum();
        MetricsConfig { smoothing: 0.02, weights: raw.iter().map(|w| w / s).collect() }
    }
}

/// Mean Euclidean error over agents and steps (`[agent][step]` poses).
pub fn ade(rollout: &[Vec<Pose2>], ground_truth: &[Vec<Pose2>]) -> Result<f64> {
    if rollout.len() != ground_truth.len() {
        return Err(MetricsError::Horizon(rollout.len(), ground_truth.len()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, b) in rollout.iter().zip(ground_truth) {
        if a.len() != b.len() {
            return Err(MetricsError::Horizon(a.len(), b.len()));
        }
        for (p, q) in a.iter().zip(b) {
            total += p.position().dist(q.position());
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// `(mean ADE, min ADE)` over rollouts.
pub fn ade_stats(rollouts: &[Rollout], ground_truth: &[Vec<Pose2>]) -> Result<(f64, f64)> {
    if rollouts.is_empty() {
        return Err(MetricsError::NoRollouts);
    }
    let v = rollouts.iter().map(|r| ade(&r.poses, ground_truth)).collect::<Result<Vec<_>>>()?;
    Ok((v.iter().sum::<f64>() / v.len() as f64, v.iter().copied().fold(f64::INFINITY, f64::min)))
}

pub fn min_ade(rollouts: &[Rollout], ground_truth: &[Vec<Pose2>]) -> Result<f64> {
    Ok(ade_stats(rollouts, ground_truth)?.1)
}

/// Fraction of (rollout, agent) trajectories with at least one collision,
/// and with at least one offroad step.
pub fn failure_rates(batch: &RolloutBatch) -> (f64, f64) {
    let mut n = 0usize;
    let (mut c, mut o) = (0usize, 0usize);
    for r in &batch.rollouts {
        for per in &r.rewards {
            n += 1;
            c += per.iter().any(|s| s.r_collision < 0.0) as usize;
            o += per.iter().any(|s| s.r_offroad < 0.0) as usize;
        }
    }
    let n = n.max(1) as f64;
    (c as f64 / n, o as f64 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentHistogram {
    pub component: Component,
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
    pub smoothing: f64,
}

impl ComponentHistogram {
    pub fn build(component: Component, samples: &[f64], smoothing: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(MetricsError::EmptyHistogram);
        }
        let (lo, hi, n) = component.bins();
        let edges: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let mut counts = vec![0.0; n];
        let mut h = ComponentHistogram { component, edges, probs: vec![], smoothing };
        for &s in samples {
            counts[h.bin(s)] += 1.0;
        }
        let total = samples.len() as f64;
        h.probs = counts.iter().map(|c| (1.0 - smoothing) * c / total + smoothing / n as f64).collect();
        Ok(h)
    }

    /// Bin of a value, clamped into the range.
    pub fn bin(&self, v: f64) -> usize {
        let n = self.edges.len() - 1;
        let (lo, hi) = (self.edges[0], self.edges[n]);
        let t = math::floor((v - lo) / (hi - lo) * n as f64);
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    pub fn nll(&self, v: f64) -> f64 {
        -math::ln(self.probs[self.bin(v)])
    }
}

/// Likelihood `exp(-mean NLL)` of ground-truth values under a histogram.
pub fn component_likelihood(hist: &ComponentHistogram, ground_truth: &[f64]) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyHistogram);
    }
    let m = ground_truth.iter().map(|&v| hist.nll(v)).sum::<f64>() / ground_truth.len() as f64;
    Ok(math::exp(-m))
}

/// Per-agent feature streams of one trajectory set.
fn features(component: Component, start: &[Pose2], poses: &[Vec<Pose2>], rewards: &[Vec<StepReward>], edges: &[Polyline]) -> Vec<Vec<f64>> {
    poses
        .iter()
        .enumerate()
        .map(|(a, traj)| {
            let mut chain = vec![start[a]];
            chain.extend_from_slice(traj);
            let speed: Vec<f64> = chain.windows(2).map(|w| w[0].position().dist(w[1].position()) / STEP_DT).collect();
            let yaw: Vec<f64> = chain.windows(2).map(|w| math::normalize_angle(w[1].heading - w[0].heading) / STEP_DT).collect();
            let diff = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]) / STEP_DT).collect::<Vec<f64>>();
            match component {
                Component::LinearSpeed => speed,
                Component::LinearAccel => diff(&speed),
                Component::AngularSpeed => yaw,
                Component::AngularAccel => diff(&yaw),
                Component::CollisionIndicator => rewards[a].iter().map(|r| (r.r_collision < 0.0) as u8 as f64).collect(),
                Component::OffroadIndicator => rewards[a].iter().map(|r| (r.r_offroad < 0.0) as u8 as f64).collect(),
                Component::DistToRoadEdge => traj
                    .iter()
                    .map(|p| edges.iter().map(|e| e.distance_to(p.position())).fold(f64::INFINITY, f64::min).min(1e3))
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub ade: f64,
    pub min_ade: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    /// Likelihood per entry of `Component::ALL`.
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenarios: Vec<ScenarioMetrics>,
    pub weights: Vec<f64>,
    pub realism: f64,
    pub mean_ade: f64,
    pub mean_min_ade: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    /// Components not computed at this scale.
    pub absent: Vec<alloc::string::String>,
}

/// Scores a batch (rewards filled or not) against the recorded future.
pub fn evaluate_scenario(scenario: &Scenario, batch: &RolloutBatch, cfg: &MetricsConfig) -> Result<ScenarioMetrics> {
    if batch.rollouts.is_empty() {
        return Err(MetricsError::NoRollouts);
    }
    let env = Environment::new(scenario, batch.horizon, crate::environment::DEFAULT_COLLISION_WEIGHT);
    let mut scored = batch.clone();
    if scored.rollouts.iter().any(|r| r.rewards.is_empty()) {
        env.score_rollouts(&mut scored);
    }
    let mut gt = ground_truth_batch(scenario, batch.horizon).ok_or(MetricsError::NoGroundTruth)?;
    env.score_rollouts(&mut gt);
    let gt_roll = &gt.rollouts[0];
    let (ade_mean, ade_min) = ade_stats(&scored.rollouts, &gt_roll.poses)?;
    let (collision_rate, offroad_rate) = failure_rates(&scored);
    let edges = scenario.road_edges();
    let mut components = Vec::with_capacity(Component::ALL.len());
    for c in Component::ALL {
        let truth = features(c, &gt.start_poses, &gt_roll.poses, &gt_roll.rewards, &edges);
        let sampled: Vec<Vec<Vec<f64>>> =
            scored.rollouts.iter().map(|r| features(c, &scored.start_poses, &r.poses, &r.rewards, &edges)).collect();
        let mut per_agent = Vec::new();
        for (a, t) in truth.iter().enumerate() {
            if t.is_empty() {
                continue;
            }
            // one histogram per step over the rollouts
            let mut nll = 0.0;
            for (step, &v) in t.iter().enumerate() {
                let samples: Vec<f64> = sampled.iter().map(|f| f[a][step]).collect();
                nll += ComponentHistogram::build(c, &samples, cfg.smoothing)?.nll(v);
            }
            per_agent.push(math::exp(-nll / t.len() as f64));
        }
        components.push(per_agent.iter().sum::<f64>() / per_agent.len().max(1) as f64);
    }
    Ok(ScenarioMetrics { ade: ade_mean, min_ade: ade_min, collision_rate, offroad_rate, components })
}

/// `(1 / N) sum_i sum_j w_j m_ij`.
pub fn realism_score(components: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(MetricsError::WeightSum(s));
    }
    let mut total = 0.0;
    for m in components {
        if m.len() != weights.len() {
            return Err(MetricsError::WeightCount(weights.len(), m.len()));
        }
        total += m.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
    }
    Ok(total / components.len().max(1) as f64)
}

pub fn build_report(scenarios: Vec<ScenarioMetrics>, cfg: &MetricsConfig) -> Result<MetricReport> {
    let n = scenarios.len().max(1) as f64;
    let comps: Vec<Vec<f64>> = scenarios.iter().map(|s| s.components.clone()).collect();
    let realism = realism_score(&comps, &cfg.weights)?;
    Ok(MetricReport {
        mean_ade: scenarios.iter().map(|s| s.ade).sum::<f64>() / n,
        mean_min_ade: scenarios.iter().map(|s| s.min_ade).sum::<f64>() / n,
        collision_rate: scenarios.iter().map(|s| s.collision_rate).sum::<f64>() / n,
        offroad_rate: scenarios.iter().map(|s| s.offroad_rate).sum::<f64>() / n,
        weights: cfg.weights.clone(),
        realism,
        scenarios,
        absent: vec!["time_to_collision".into(), "distance_to_nearest_object".into()],
    })
}
