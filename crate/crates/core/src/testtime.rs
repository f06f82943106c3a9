//! Test-time search: oversample rollouts in waves, keep the ones that pass
//! the collision/offroad checker, and optionally reduce the pool to diverse
//! representatives with K-Medoids over final poses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, Rollout, RolloutBatch};
use crate::math;
use crate::model::{ModelError, PolicyModel, RolloutOptions};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TestTimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("k = {k} exceeds the {n} candidates")]
    TooFewPoints { k: usize, n: usize },
    #[error("invalid test-time config: {0}")]
    Config(&'static str),
}

type Result<T> = core::result::Result<T, TestTimeError>;

/// Monotonic time source for stage telemetry.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Clock that never advances.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestTimeConfig {
    /// Rollouts returned.
    pub n: usize,
    /// Rollouts sampled per wave.
    pub batch: usize,
    pub use_search: bool,
    pub use_cluster: bool,
    /// Oversampling factor when clustering; `ceil(budget / n)` if unset.
    pub k_tt: Option<usize>,
    pub max_candidate_budget: usize,
    /// Meters per radian of final heading in the clustering metric.
    pub heading_scale: f64,
    pub temperature: f64,
    pub horizon: usize,
    pub collision_weight: f64,
    pub seed: u64,
}

impl Default for TestTimeConfig {
    fn default() -> Self {
        TestTimeConfig {
            n: 32,
            batch: 32,
            use_search: true,
            use_cluster: false,
            k_tt: None,
            max_candidate_budget: 1024,
            heading_scale: 2.0,
            temperature: 1.0,
            horizon: 16,
            collision_weight: 0.5,
            seed: 0,
        }
    }
}

impl TestTimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.batch == 0 || self.horizon == 0 {
            return Err(TestTimeError::Config("n, batch and horizon must be positive"));
        }
        if self.max_candidate_budget < self.n {
            return Err(TestTimeError::Config("budget must be at least n"));
        }
        if self.k_tt == Some(0) {
            return Err(TestTimeError::Config("k_tt must be positive"));
        }
        Ok(())
    }

    pub fn oversample(&self) -> usize {
        self.k_tt.unwrap_or_else(|| self.max_candidate_budget.div_ceil(self.n))
    }

    /// Accepted candidates gathered before the final reduction.
    pub fn target(&self) -> usize {
        if self.use_cluster {
            self.oversample() * self.n
        } else {
            self.n
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Telemetry {
    pub sampling_ns: u64,
    pub scoring_ns: u64,
    pub clustering_ns: u64,
}

impl Telemetry {
    pub fn total_ns(&self) -> u64 {
        self.sampling_ns + self.scoring_ns + self.clustering_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTimeResult {
    /// Scored rollouts returned.
    pub batch: RolloutBatch,
    pub sampled: usize,
    pub feasible: usize,
    /// Set when the budget ran out before enough rollouts passed the checker;
    /// the shortfall is filled with the least-violating candidates.
    pub budget_exhausted: bool,
    pub warning: Option<String>,
    pub telemetry: Telemetry,
}

/// Concatenated final `(x, y, s * heading)` of all agents.
pub fn rollout_feature(r: &Rollout, heading_scale: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 * r.poses.len());
    for p in r.final_poses() {
        f.extend([p.x, p.y, heading_scale * p.heading]);
    }
    f
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medoids {
    /// Medoid indices, ascending.
    pub medoids: Vec<usize>,
    /// Medoid position (in `medoids`) of each point.
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Total cost after seeding and after each accepted swap.
    pub history: Vec<f64>,
}

fn total_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..d.len()).map(|i| medoids.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min)).sum()
}

/// K-Medoids: farthest-point seeding from a seeded first pick, then PAM
/// swaps (best improving swap per pass) until no swap lowers the cost.
/// Ties go to the lowest index.
pub fn k_medoids(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Medoids> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(TestTimeError::TooFewPoints { k, n });
    }
    let d: Vec<Vec<f64>> = features.iter().map(|a| features.iter().map(|b| dist(a, b)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.gen_range(0..n)];
    while medoids.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..n {
            if medoids.contains(&i) {
                continue;
            }
            let near = medoids.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min);
            if near > best.0 {
                best = (near, i);
            }
        }
        medoids.push(best.1);
    }
    let mut cost = total_cost(&d, &medoids);
    let mut history = vec![cost];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..k {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = total_cost(&d, &trial);
                if c < cost - 1e-12 && best.is_none_or(|b| c < b.0) {
                    best = Some((c, slot, cand));
                }
            }
        }
        match best {
            Some((c, slot, cand)) => {
                medoids[slot] = cand;
                cost = c;
                history.push(c);
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    let assignment = (0..n)
        .map(|i| {
            let mut b = 0;
            for (j, &m) in medoids.iter().enumerate() {
                if d[i][m] < d[i][medoids[b]] {
                    b = j;
                }
            }
            b
        })
        .collect();
    Ok(Medoids { medoids, assignment, cost, history })
}

/// Samples, filters and reduces rollouts for one scenario.
pub fn test_time_generate(model: &PolicyModel, scenario: &Scenario, cfg: &TestTimeConfig, clock: &dyn Clock) -> Result<TestTimeResult> {
    cfg.validate()?;
    let env = Environment::new(scenario, cfg.horizon, cfg.collision_weight);
    let target = cfg.target();
    let budget = if cfg.use_search || cfg.use_cluster { cfg.max_candidate_budget.max(target) } else { cfg.n };
    let mut tel = Telemetry::default();
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut template: Option<RolloutBatch> = None;
    let mut accepted: Vec<Rollout> = Vec::new();
    let mut rejected: Vec<Rollout> = Vec::new();
    let mut sampled = 0;
    while accepted.len() < target && sampled < budget {
        let wave = cfg.batch.min(budget - sampled);
        let opts = RolloutOptions { n_rollouts: wave, horizon: cfg.horizon, temperature: cfg.temperature, seed: root.gen() };
        let t0 = clock.now_ns();
        let mut b = model.rollout(scenario, &opts)?;
        let t1 = clock.now_ns();
        env.score_rollouts(&mut b);
        let t2 = clock.now_ns();
        tel.sampling_ns += t1 - t0;
        tel.scoring_ns += t2 - t1;
        sampled += wave;
        for r in b.rollouts.drain(..) {
            if !cfg.use_search || r.total_penalty() == 0.0 {
                accepted.push(r);
            } else {
                rejected.push(r);
            }
        }
        template.get_or_insert(b);
    }
    let feasible = if cfg.use_search { accepted.len() } else { accepted.iter().filter(|r| r.total_penalty() == 0.0).count() };
    let mut exhausted = false;
    let mut warning = None;
    if accepted.len() < target {
        exhausted = true;
        warning = Some(alloc::format!("budget of {budget} rollouts gave {} of {target} feasible candidates", accepted.len()));
        // stable sort keeps sampling order among equal penalties
        rejected.sort_by(|a, b| a.total_penalty().total_cmp(&b.total_penalty()));
        let need = target - accepted.len();
        accepted.extend(rejected.into_iter().take(need));
    }
    accepted.truncate(target);
    let chosen = if cfg.use_cluster && accepted.len() > cfg.n {
        let t0 = clock.now_ns();
        let feats: Vec<Vec<f64>> = accepted.iter().map(|r| rollout_feature(r, cfg.heading_scale)).collect();
        let m = k_medoids(&feats, cfg.n, cfg.seed)?;
        tel.clustering_ns += clock.now_ns() - t0;
        m.medoids.iter().map(|&i| accepted[i].clone()).collect()
    } else {
        accepted.truncate(cfg.n);
        accepted
    };
    let mut batch = template.expect("at least one wave").empty_like();
    for r in chosen {
        batch.push(r);
    }
    Ok(TestTimeResult { batch, sampled, feasible, budget_exhausted: exhausted, warning, telemetry: tel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_uses_every_point() {
        let f: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0]).collect();
        let m = k_medoids(&f, 5, 1).unwrap();
        assert_eq!(m.medoids, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.cost, 0.0);
        assert!(k_medoids(&f, 6, 1).is_err());
    }

    #[test]
    fn identical_points_cost_zero() {
        let f = vec![vec![1.0, 2.0]; 6];
        let m = k_medoids(&f, 3, 4).unwrap();
        assert_eq!(m.cost, 0.0);
        assert_eq!(m.medoids.len(), 3);
    }

    #[test]
    fn oversample_default() {
        let cfg = TestTimeConfig { use_cluster: true, ..TestTimeConfig::default() };
        assert_eq!((cfg.oversample(), cfg.target()), (32, 1024));
        let cfg = TestTimeConfig { n: 3, max_candidate_budget: 10, ..cfg };
        assert_eq!(cfg.oversample(), 4);
    }
}
