//! Scenario data model, map vectorisation and validation.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedBox, Polyline, Pose2, Vec2};
use crate::math;

/// Native track resolution.
pub const NATIVE_DT: f64 = 0.1;
/// Steps at native resolution in a generated scenario (0 s ..= 9 s).
pub const NATIVE_STEPS: usize = 91;
pub const LANE_ELEMENT_LENGTH: f64 = 10.0;
pub const EDGE_ELEMENT_LENGTH: f64 = 20.0;
pub const MAP_SAMPLE_SPACING: f64 = 1.0;
pub const MIN_INTEREST: usize = 2;
pub const MAX_INTEREST: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("polyline too short for segmentation ({0:.3} m < 1 m)")]
    PolylineTooShort(f64),
    #[error("interest count out of range: {0} (expected 2..=8)")]
    InterestCount(usize),
    #[error("unknown interest agent id {0}")]
    UnknownInterest(u32),
    #[error("duplicate agent id {0}")]
    DuplicateAgent(u32),
    #[error("agent {id}: timestamps not strictly increasing at step {step}")]
    NonMonotoneTime { id: u32, step: usize },
    #[error("agent {id}: valid mask length {mask} != state count {states}")]
    MaskLength { id: u32, mask: usize, states: usize },
    #[error("agent {id}: non-finite pose at step {step}")]
    NonFinitePose { id: u32, step: usize },
    #[error("agent {id}: bad footprint {length}x{width}")]
    BadFootprint { id: u32, length: f64, width: f64 },
    #[error("interest agent {id} lacks valid history over [anchor-1s, anchor]")]
    MissingHistory { id: u32 },
    #[error("map element {index}: {reason}")]
    BadMapElement { index: usize, reason: String },
    #[error("anchor {anchor} / horizon {horizon} invalid")]
    BadTiming { anchor: f64, horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapType {
    Lane,
    RoadEdge,
}

impl MapType {
    pub fn max_length(self) -> f64 {
        match self {
            MapType::Lane => LANE_ELEMENT_LENGTH,
            MapType::RoadEdge => EDGE_ELEMENT_LENGTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    /// Default footprint (length, width) in meters.
    pub fn default_footprint(self) -> (f64, f64) {
        match self {
            AgentType::Vehicle => (4.5, 2.0),
            AgentType::Pedestrian => (0.8, 0.8),
            AgentType::Cyclist => (1.8, 0.6),
        }
    }

    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }
}

/// `[sx, sy, ex, ey, th, le, ty]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapVector {
    pub sx: f64,
    pub sy: f64,
    pub ex: f64,
    pub ey: f64,
    pub th: f64,
    pub le: f64,
    pub ty: MapType,
}

impl MapVector {
    pub fn from_points(a: Vec2, b: Vec2, ty: MapType) -> Self {
        let d = b - a;
        Self { sx: a.x, sy: a.y, ex: b.x, ey: b.y, th: d.angle(), le: d.norm(), ty }
    }

    pub fn start(&self) -> Vec2 {
        Vec2::new(self.sx, self.sy)
    }

    pub fn end(&self) -> Vec2 {
        Vec2::new(self.ex, self.ey)
    }

    fn consistency_error(&self) -> Option<&'static str> {
        let d = self.end() - self.start();
        if math::abs(self.le - d.norm()) > 1e-6 {
            return Some("vector length inconsistent with endpoints");
        }
        let dth = math::normalize_angle(self.th - d.angle());
        if math::abs(dth) > 1e-6 {
            return Some("vector heading inconsistent with endpoints");
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub ty: MapType,
    pub vectors: Vec<MapVector>,
}

impl MapElement {
    pub fn length(&self) -> f64 {
        self.vectors.iter().map(|v| v.le).sum()
    }

    pub fn polyline(&self) -> Polyline {
        let mut pts = Vec::with_capacity(self.vectors.len() + 1);
        pts.push(self.vectors[0].start());
        pts.extend(self.vectors.iter().map(|v| v.end()));
        // elements are validated on construction
        Polyline::new(pts).expect("map element polyline")
    }

    /// Frame at the element's first vector: origin at its start, heading along it.
    pub fn frame(&self) -> Pose2 {
        let v = &self.vectors[0];
        Pose2::new(v.sx, v.sy, v.th)
    }

    /// Midpoint-ish reference pose used for attention positions.
    pub fn center_pose(&self) -> Pose2 {
        let v = &self.vectors[self.vectors.len() / 2];
        Pose2::new(v.sx, v.sy, v.th)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose2,
    /// Seconds relative to the scenario anchor.
    pub ts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub ty: AgentType,
    pub length: f64,
    pub width: f64,
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
}

impl AgentTrack {
    pub fn footprint(&self, pose: Pose2) -> OrientedBox {
        OrientedBox { center: pose, length: self.length, width: self.width }
    }

    /// Native step index for an absolute time (seconds since the first state).
    pub fn step_of(&self, abs_time: f64) -> usize {
        math::floor(abs_time / NATIVE_DT + 0.5) as usize
    }

    pub fn pose_at_step(&self, step: usize) -> Option<Pose2> {
        match (self.states.get(step), self.valid.get(step)) {
            (Some(s), Some(true)) => Some(s.pose),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub map_elements: Vec<MapElement>,
    pub agents: Vec<AgentTrack>,
    pub interest_ids: Vec<u32>,
    /// Seconds from the first state to the anchor.
    pub anchor_time: f64,
    pub horizon: f64,
}

impl Scenario {
    pub fn agent(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Indices into `agents` of the interest agents, in `interest_ids` order.
    pub fn interest_indices(&self) -> Vec<usize> {
        self.interest_ids
            .iter()
            .filter_map(|id| self.agents.iter().position(|a| a.id == *id))
            .collect()
    }

    pub fn other_indices(&self) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| !self.interest_ids.contains(&self.agents[i].id))
            .collect()
    }

    pub fn road_edges(&self) -> Vec<Polyline> {
        self.map_elements
            .iter()
            .filter(|e| e.ty == MapType::RoadEdge)
            .map(|e| e.polyline())
            .collect()
    }

    /// Applies a rigid motion `p -> frame.compose(p)` to every coordinate.
    pub fn transformed(&self, rigid: &Pose2) -> Scenario {
        let mut s = self.clone();
        for e in &mut s.map_elements {
            for v in &mut e.vectors {
                let a = rigid.compose(&Pose2::new(v.sx, v.sy, 0.0)).position();
                let b = rigid.compose(&Pose2::new(v.ex, v.ey, 0.0)).position();
                *v = MapVector::from_points(a, b, v.ty);
            }
        }
        for a in &mut s.agents {
            for st in &mut a.states {
                st.pose = rigid.compose(&st.pose);
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.anchor_time >= 1.0 && self.horizon > 0.0) {
            return Err(ScenarioError::BadTiming { anchor: self.anchor_time, horizon: self.horizon });
        }
        let n = self.interest_ids.len();
        if !(MIN_INTEREST..=MAX_INTEREST).contains(&n) {
            return Err(ScenarioError::InterestCount(n));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if self.agents[..i].iter().any(|b| b.id == a.id) {
                return Err(ScenarioError::DuplicateAgent(a.id));
            }
            if !(a.length > 0.0 && a.width > 0.0) {
                return Err(ScenarioError::BadFootprint { id: a.id, length: a.length, width: a.width });
            }
            if a.valid.len() != a.states.len() {
                return Err(ScenarioError::MaskLength { id: a.id, mask: a.valid.len(), states: a.states.len() });
            }
            for (k, w) in a.states.windows(2).enumerate() {
                if !(w[1].ts > w[0].ts) {
                    return Err(ScenarioError::NonMonotoneTime { id: a.id, step: k + 1 });
                }
            }
            for (k, s) in a.states.iter().enumerate() {
                if a.valid[k] && !s.pose.is_finite() {
                    return Err(ScenarioError::NonFinitePose { id: a.id, step: k });
                }
            }
        }
        for (k, id) in self.interest_ids.iter().enumerate() {
            if self.interest_ids[..k].contains(id) {
                return Err(ScenarioError::DuplicateAgent(*id));
            }
            let a = self.agent(*id).ok_or(ScenarioError::UnknownInterest(*id))?;
            let first = a.step_of(self.anchor_time - 1.0);
            let last = a.step_of(self.anchor_time);
            let covered = (first..=last).all(|s| a.pose_at_step(s).is_some());
            let t0 = a.states.first().map(|s| s.ts + self.anchor_time);
            if !covered || t0.map_or(true, |t| math::abs(t) > 1e-6) {
                return Err(ScenarioError::MissingHistory { id: *id });
            }
        }
        for (index, e) in self.map_elements.iter().enumerate() {
            let bad = |reason: &str| ScenarioError::BadMapElement { index, reason: reason.into() };
            if e.vectors.is_empty() {
                return Err(bad("no vectors"));
            }
            if e.length() > e.ty.max_length() + 1e-6 {
                return Err(bad("element longer than its type allows"));
            }
            for (k, v) in e.vectors.iter().enumerate() {
                if v.ty != e.ty {
                    return Err(bad("vector type differs from element type"));
                }
                if !(v.le > 0.0) {
                    return Err(bad("zero-length vector"));
                }
                if let Some(r) = v.consistency_error() {
                    return Err(bad(r));
                }
                if k > 0 && e.vectors[k - 1].end().dist(v.start()) > 1e-6 {
                    return Err(bad("vectors not chained"));
                }
            }
        }
        Ok(())
    }
}

/// Cuts polylines into elements of at most 10 m (lanes) / 20 m (edges) and
/// resamples each at 1 m spacing. Original vertices are kept as extra sample
/// points so total arc length is preserved exactly.
pub fn segment_map(raw: &[(Polyline, MapType)]) -> Result<Vec<MapElement>, ScenarioError> {
    let mut out = Vec::new();
    for (line, ty) in raw {
        let total = line.length();
        if total < MAP_SAMPLE_SPACING {
            return Err(ScenarioError::PolylineTooShort(total));
        }
        // cumulative arc length of each original vertex
        let mut vertex_s = Vec::with_capacity(line.points().len());
        let mut acc = 0.0;
        vertex_s.push(0.0);
        for (a, b) in line.segments() {
            acc += a.dist(b);
            vertex_s.push(acc);
        }
        let piece = ty.max_length();
        let n_pieces = math::ceil(total / piece - 1e-9).max(1.0) as usize;
        for p in 0..n_pieces {
            let s0 = p as f64 * piece;
            let s1 = (s0 + piece).min(total);
            if s1 - s0 <= 1e-9 {
                continue;
            }
            let mut marks: Vec<f64> = Vec::new();
            let mut s = s0;
            while s < s1 - 1e-9 {
                marks.push(s);
                s += MAP_SAMPLE_SPACING;
            }
            marks.extend(vertex_s.iter().copied().filter(|&v| v > s0 + 1e-9 && v < s1 - 1e-9));
            marks.push(s1);
            marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            marks.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let pts: Vec<Vec2> = marks.iter().map(|&m| point_on(line, &vertex_s, m)).collect();
            let vectors = pts
                .windows(2)
                .filter(|w| w[0] != w[1])
                .map(|w| MapVector::from_points(w[0], w[1], *ty))
                .collect();
            out.push(MapElement { ty: *ty, vectors });
        }
    }
    Ok(out)
}

fn point_on(line: &Polyline, vertex_s: &[f64], s: f64) -> Vec2 {
    let pts = line.points();
    for k in 0..pts.len() - 1 {
        if s <= vertex_s[k + 1] + 1e-12 {
            let l = vertex_s[k + 1] - vertex_s[k];
            if math::abs(s - vertex_s[k + 1]) < 1e-12 {
                return pts[k + 1];
            }
            let t = ((s - vertex_s[k]) / l).clamp(0.0, 1.0);
            return pts[k] + (pts[k + 1] - pts[k]) * t;
        }
    }
    *pts.last().unwrap()
}
