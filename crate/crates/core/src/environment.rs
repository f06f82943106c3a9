//! Step-wise collision / offroad scoring of rollouts at token resolution.
//!
//! Interest agents are scored; other agents follow their recorded futures and
//! only act as obstacles. Checks run at segment endpoints (2 Hz).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{obb_intersects, segment_crosses_polyline, OrientedBox, Polyline, Pose2, Vec2};
use crate::scenario::{Scenario, NATIVE_DT};
use crate::tokenizer::MotionToken;

/// Weight of the collision term; offroad gets the remainder.
pub const DEFAULT_COLLISION_WEIGHT: f64 = 0.5;
pub const STEP_DT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReward {
    pub r_collision: f64,
    pub r_offroad: f64,
    pub combined: f64,
}

impl StepReward {
    pub fn new(collided: bool, offroad: bool, w: f64) -> Self {
        let r_collision = -(collided as u8 as f64);
        let r_offroad = -(offroad as u8 as f64);
        StepReward { r_collision, r_offroad, combined: w * r_collision + (1.0 - w) * r_offroad }
    }

    pub fn is_clean(&self) -> bool {
        self.r_collision == 0.0 && self.r_offroad == 0.0
    }
}

/// One sampled future: indices are `[agent][step]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub seed: u64,
    /// Pose at the end of each step (anchor + 0.5 s * (t + 1)).
    pub poses: Vec<Vec<Pose2>>,
    pub tokens: Vec<Vec<MotionToken>>,
    pub log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<StepReward>>,
    pub terminal: Vec<Vec<bool>>,
}

impl Rollout {
    pub fn total_penalty(&self) -> f64 {
        -self.rewards.iter().flatten().map(|r| r.r_collision + r.r_offroad).sum::<f64>()
    }

    pub fn collided(&self) -> bool {
        self.rewards.iter().flatten().any(|r| r.r_collision < 0.0)
    }

    pub fn went_offroad(&self) -> bool {
        self.rewards.iter().flatten().any(|r| r.r_offroad < 0.0)
    }

    pub fn final_poses(&self) -> Vec<Pose2> {
        self.poses.iter().map(|p| *p.last().expect("non-empty rollout")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub n_rollouts: usize,
    pub anchor_time: f64,
    pub horizon: usize,
    /// Interest agent ids, in scenario order.
    pub agent_ids: Vec<u32>,
    /// Poses at the anchor.
    pub start_poses: Vec<Pose2>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutBatch {
    pub fn empty_like(&self) -> Self {
        RolloutBatch { rollouts: Vec::new(), n_rollouts: 0, ..self.clone() }
    }

    pub fn push(&mut self, r: Rollout) {
        self.rollouts.push(r);
        self.n_rollouts = self.rollouts.len();
    }
}

#[derive(Debug, Clone)]
struct Edge {
    line: Polyline,
    lo: Vec2,
    hi: Vec2,
}

/// Scoring context for one scenario: road edges and other-agent futures.
#[derive(Debug, Clone)]
pub struct Environment {
    edges: Vec<Edge>,
    collision_weight: f64,
    /// `[step][k]` boxes of the non-scored agents at each rollout step end.
    others: Vec<Vec<OrientedBox>>,
    /// Footprint (length, width) of each interest agent.
    dims: Vec<(f64, f64)>,
}

fn bbox(points: &[Vec2]) -> (Vec2, Vec2) {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo, hi)
}

impl Environment {
    pub fn new(scenario: &Scenario, horizon: usize, collision_weight: f64) -> Self {
        let edges = scenario
            .road_edges()
            .into_iter()
            .map(|line| {
                let (lo, hi) = bbox(line.points());
                Edge { line, lo, hi }
            })
            .collect();
        let interest = scenario.interest_indices();
        let others_idx = scenario.other_indices();
        let others = (0..horizon)
            .map(|t| {
                let time = scenario.anchor_time + STEP_DT * (t + 1) as f64;
                let step = crate::math::floor(time / NATIVE_DT + 0.5) as usize;
                others_idx
                    .iter()
                    .filter_map(|&i| {
                        let a = &scenario.agents[i];
                        a.pose_at_step(step).map(|p| a.footprint(p))
                    })
                    .collect()
            })
            .collect();
        let dims = interest.iter().map(|&i| (scenario.agents[i].length, scenario.agents[i].width)).collect();
        Environment { edges, collision_weight, others, dims }
    }

    pub fn collision_weight(&self) -> f64 {
        self.collision_weight
    }

    fn crosses_edge(&self, a: Vec2, b: Vec2) -> bool {
        let (lo, hi) = (Vec2::new(a.x.min(b.x), a.y.min(b.y)), Vec2::new(a.x.max(b.x), a.y.max(b.y)));
        self.edges.iter().any(|e| {
            hi.x >= e.lo.x && lo.x <= e.hi.x && hi.y >= e.lo.y && lo.y <= e.hi.y && segment_crosses_polyline(a, b, &e.line)
        })
    }

    /// Rewards of the first `n_scored` boxes for the transition `prev -> next`.
    /// `prev` needs only the scored boxes; every box in `next` is an obstacle
    /// for every other box.
    pub fn score_step(&self, prev: &[OrientedBox], next: &[OrientedBox], n_scored: usize) -> Vec<StepReward> {
        (0..n_scored)
            .map(|i| {
                let collided = next.iter().enumerate().any(|(j, b)| j != i && obb_intersects(&next[i], b));
                let (c0, c1) = (prev[i].corners(), next[i].corners());
                let offroad = (0..4).any(|k| self.crosses_edge(c0[k], c1[k]));
                StepReward::new(collided, offroad, self.collision_weight)
            })
            .collect()
    }

    /// Per-agent per-step rewards of one trajectory set (`[agent][step]`),
    /// starting from `start` poses.
    pub fn score_trajectories(&self, start: &[Pose2], poses: &[Vec<Pose2>]) -> Vec<Vec<StepReward>> {
        let n = start.len();
        let horizon = poses.first().map_or(0, Vec::len);
        let mut out = vec![Vec::with_capacity(horizon); n];
        let boxes = |ps: &mut dyn Iterator<Item = Pose2>| -> Vec<OrientedBox> {
            ps.zip(&self.dims).map(|(p, &(l, w))| OrientedBox { center: p, length: l, width: w }).collect()
        };
        let mut prev = boxes(&mut start.iter().copied());
        for t in 0..horizon {
            let mut next = boxes(&mut poses.iter().map(|p| p[t]));
            next.extend(self.others[t].iter().copied());
            for (i, r) in self.score_step(&prev, &next, n).into_iter().enumerate() {
                out[i].push(r);
            }
            next.truncate(n);
            prev = next;
        }
        out
    }

    /// Fills rewards and terminal flags of every rollout.
    pub fn score_rollouts(&self, batch: &mut RolloutBatch) {
        for r in &mut batch.rollouts {
            r.rewards = self.score_trajectories(&batch.start_poses, &r.poses);
            r.terminal = r.poses.iter().map(|p| (0..p.len()).map(|t| t + 1 == p.len()).collect()).collect();
        }
    }
}

/// Scores a batch against a scenario with the default weight.
pub fn score_rollouts(scenario: &Scenario, batch: &mut RolloutBatch) {
    Environment::new(scenario, batch.horizon, DEFAULT_COLLISION_WEIGHT).score_rollouts(batch);
}

/// The recorded future of the interest agents as a single-rollout batch.
/// Returns `None` when an interest agent has a gap over the horizon.
pub fn ground_truth_batch(scenario: &Scenario, horizon: usize) -> Option<RolloutBatch> {
    let idx = scenario.interest_indices();
    let at = |i: usize, time: f64| scenario.agents[i].pose_at_step(crate::math::floor(time / NATIVE_DT + 0.5) as usize);
    let start_poses = idx.iter().map(|&i| at(i, scenario.anchor_time)).collect::<Option<Vec<_>>>()?;
    let poses = idx
        .iter()
        .map(|&i| (0..horizon).map(|t| at(i, scenario.anchor_time + STEP_DT * (t + 1) as f64)).collect::<Option<Vec<_>>>())
        .collect::<Option<Vec<_>>>()?;
    let n = idx.len();
    Some(RolloutBatch {
        n_rollouts: 1,
        anchor_time: scenario.anchor_time,
        horizon,
        agent_ids: scenario.interest_ids.clone(),
        start_poses,
        rollouts: vec![Rollout {
            seed: 0,
            poses,
            tokens: vec![Vec::new(); n],
            log_probs: vec![Vec::new(); n],
            rewards: Vec::new(),
            terminal: Vec::new(),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_weights() {
        let r = StepReward::new(true, false, 0.5);
        assert_eq!((r.r_collision, r.r_offroad, r.combined), (-1.0, 0.0, -0.5));
        let r = StepReward::new(true, true, 0.5);
        assert_eq!(r.combined, -1.0);
        assert!(StepReward::new(false, false, 0.5).is_clean());
    }
}
