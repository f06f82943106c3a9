//! Procedural traffic scenarios with scripted kinematic agents.
//!
//! Every template builds a small road network out of line/arc paths, places
//! agents on lane paths with piecewise-constant acceleration plans and, where
//! paths conflict, scripted yields (brake to a stop line, wait, go). Candidate
//! plans are rejected until they clear every already placed agent with an
//! inflated footprint, so ground truth is collision-free by construction.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{obb_intersects, OrientedBox, Polyline, Pose2, Vec2};
use crate::math::{self, FRAC_PI_2, PI};
use crate::scenario::{
    segment_map, AgentState, AgentTrack, AgentType, MapType, Scenario, NATIVE_DT, NATIVE_STEPS,
};

pub const LANE_WIDTH: f64 = 3.5;
const HALF_LANE: f64 = 0.5 * LANE_WIDTH;
const CURB_RADIUS: f64 = 6.0;
const SUBSTEPS: usize = 5;
/// Extra clearance used by the rejection sampler (length, width).
const SAFETY_INFLATION: (f64, f64) = (1.5, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curve,
    Intersection,
    Merge,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Straight, Template::Curve, Template::Intersection, Template::Merge];
    pub const HAZARD: [Template; 2] = [Template::Intersection, Template::Merge];

    pub fn parse(s: &str) -> Option<Template> {
        match s {
            "straight" => Some(Template::Straight),
            "curve" => Some(Template::Curve),
            "intersection" => Some(Template::Intersection),
            "merge" => Some(Template::Merge),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curve => "curve",
            Template::Intersection => "intersection",
            Template::Merge => "merge",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Template::Straight => 0x5354_5241,
            Template::Curve => 0x4355_5256,
            Template::Intersection => 0x494e_5452,
            Template::Merge => 0x4d45_5247,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Line { start: Vec2, heading: f64, len: f64 },
    /// `sweep` is signed: positive turns left.
    Arc { center: Vec2, radius: f64, start_angle: f64, sweep: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Line { len, .. } => len,
            Piece::Arc { radius, sweep, .. } => radius * math::abs(sweep),
        }
    }

    fn pose_at(&self, s: f64) -> Pose2 {
        match *self {
            Piece::Line { start, heading, .. } => {
                let p = start + Vec2::new(math::cos(heading), math::sin(heading)) * s;
                Pose2::new(p.x, p.y, heading)
            }
            Piece::Arc { center, radius, start_angle, sweep } => {
                let dir = if sweep >= 0.0 { 1.0 } else { -1.0 };
                let a = start_angle + dir * s / radius;
                let p = center + Vec2::new(math::cos(a), math::sin(a)) * radius;
                Pose2::new(p.x, p.y, a + dir * FRAC_PI_2)
            }
        }
    }
}

/// Arc-length parameterised chain of line and arc pieces.
#[derive(Debug, Clone)]
pub struct Path {
    pieces: Vec<Piece>,
}

impl Path {
    fn line(start: Vec2, heading: f64, len: f64) -> Self {
        Path { pieces: vec![Piece::Line { start, heading, len }] }
    }

    fn end_pose(&self) -> Pose2 {
        let last = self.pieces.last().unwrap();
        last.pose_at(last.len())
    }

    fn then_line(mut self, len: f64) -> Self {
        let e = self.end_pose();
        self.pieces.push(Piece::Line { start: e.position(), heading: e.heading, len });
        self
    }

    /// Appends an arc turning by `sweep` (positive = left) with the given radius.
    fn then_arc(mut self, radius: f64, sweep: f64) -> Self {
        let e = self.end_pose();
        let side = if sweep >= 0.0 { 1.0 } else { -1.0 };
        let normal = Vec2::new(-math::sin(e.heading), math::cos(e.heading)) * side;
        let center = e.position() + normal * radius;
        let start_angle = (e.position() - center).angle();
        self.pieces.push(Piece::Arc { center, radius, start_angle, sweep });
        self
    }

    pub fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.len()).sum()
    }

    /// Pose at arc length `s`; beyond either end the path extends straight.
    pub fn pose_at(&self, s: f64) -> Pose2 {
        if s < 0.0 {
            let p0 = self.pieces[0].pose_at(0.0);
            let q = p0.position() + Vec2::new(math::cos(p0.heading), math::sin(p0.heading)) * s;
            return Pose2::new(q.x, q.y, p0.heading);
        }
        let mut acc = 0.0;
        for p in &self.pieces {
            let l = p.len();
            if s <= acc + l {
                return p.pose_at(s - acc);
            }
            acc += l;
        }
        let e = self.end_pose();
        let q = e.position() + Vec2::new(math::cos(e.heading), math::sin(e.heading)) * (s - acc);
        Pose2::new(q.x, q.y, e.heading)
    }

    /// Points with Euclidean spacing of exactly `step` (last gap may be shorter),
    /// shifted laterally by `offset` (positive = left).
    fn sample(&self, step: f64, offset: f64) -> Vec<Vec2> {
        let at = |s: f64| {
            let p = self.pose_at(s);
            p.position() + Vec2::new(-math::sin(p.heading), math::cos(p.heading)) * offset
        };
        let total = self.length();
        let mut pts = vec![at(0.0)];
        let mut s = 0.0;
        loop {
            let last = *pts.last().unwrap();
            if at(total).dist(last) <= step {
                if at(total).dist(last) > 0.2 * step {
                    pts.push(at(total));
                } else if pts.len() > 1 {
                    *pts.last_mut().unwrap() = at(total);
                }
                break;
            }
            // bisection on arc length for a chord of exactly `step`
            let (mut lo, mut hi) = (s, (s + 2.0 * step).min(total));
            while at(hi).dist(last) < step && hi < total {
                hi = (hi + step).min(total);
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if at(mid).dist(last) < step {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            s = hi;
            pts.push(at(s));
        }
        pts
    }
}

fn rotate_path(path: &Path, angle: f64) -> Path {
    let pieces = path
        .pieces
        .iter()
        .map(|p| match *p {
            Piece::Line { start, heading, len } => Piece::Line { start: start.rotate(angle), heading: heading + angle, len },
            Piece::Arc { center, radius, start_angle, sweep } => {
                Piece::Arc { center: center.rotate(angle), radius, start_angle: start_angle + angle, sweep }
            }
        })
        .collect();
    Path { pieces }
}

#[derive(Debug, Clone, Copy)]
struct Stop {
    s_stop: f64,
    wait: f64,
    go_accel: f64,
    v_target: f64,
}

#[derive(Debug, Clone)]
struct Plan {
    s0: f64,
    v0: f64,
    vmax: f64,
    /// (duration, acceleration) pieces; zero acceleration afterwards.
    profile: Vec<(f64, f64)>,
    brake: f64,
    stop: Option<Stop>,
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Cruise,
    Brake,
    Hold(f64),
    Go,
    Free,
}

/// Integrates a plan; returns arc length at every native step.
fn simulate(plan: &Plan) -> Vec<f64> {
    let dt = NATIVE_DT / SUBSTEPS as f64;
    let mut s = plan.s0;
    let mut v = plan.v0;
    let mut t = 0.0;
    let mut phase = Phase::Cruise;
    let mut out = Vec::with_capacity(NATIVE_STEPS);
    out.push(s);
    for step in 1..NATIVE_STEPS {
        for _ in 0..SUBSTEPS {
            let mut a = match phase {
                Phase::Cruise => profile_accel(&plan.profile, t),
                Phase::Brake => {
                    let stop = plan.stop.unwrap();
                    -v * v / (2.0 * (stop.s_stop - s).max(1e-3))
                }
                Phase::Hold(_) => 0.0,
                Phase::Go => plan.stop.unwrap().go_accel,
                Phase::Free => 0.0,
            };
            if phase == Phase::Cruise {
                if let Some(stop) = plan.stop {
                    if s + v * v / (2.0 * plan.brake) + v * dt >= stop.s_stop {
                        phase = Phase::Brake;
                        a = -v * v / (2.0 * (stop.s_stop - s).max(1e-3));
                    }
                }
            }
            v = (v + a * dt).clamp(0.0, plan.vmax);
            s += v * dt;
            t += dt;
            if phase == Phase::Brake {
                let s_stop = plan.stop.unwrap().s_stop;
                if s >= s_stop {
                    s = s_stop;
                    v = 0.0;
                }
            }
            match phase {
                Phase::Brake if v < 0.05 => {
                    v = 0.0;
                    phase = Phase::Hold(t + plan.stop.unwrap().wait);
                }
                Phase::Hold(release) if t >= release - 1e-9 => phase = Phase::Go,
                Phase::Go if v >= plan.stop.unwrap().v_target => phase = Phase::Free,
                _ => {}
            }
            if let Phase::Hold(_) = phase {
                v = 0.0;
            }
        }
        let _ = step;
        out.push(s);
    }
    out
}

fn profile_accel(profile: &[(f64, f64)], t: f64) -> f64 {
    let mut acc = 0.0;
    for &(d, a) in profile {
        if t < acc + d {
            return a;
        }
        acc += d;
    }
    0.0
}

struct Lane {
    path: Path,
    /// Arc length of the conflict point / stop line, if the lane has one.
    stop_s: Option<f64>,
    /// Arc length of the conflict zone centre used to time arrivals.
    conflict_s: f64,
}

struct Road {
    lanes: Vec<Lane>,
    /// Extra lanes (turn connectors) drawn on the map but without own agents.
    map_lanes: Vec<Path>,
    edges: Vec<Vec<Vec2>>,
    sidewalks: Vec<Path>,
}

struct Placed {
    track: AgentTrack,
    lane: usize,
    yielded: bool,
}

fn random_profile(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut prof = Vec::new();
    let mut t = 0.0;
    while t < 9.0 {
        let d = rng.gen_range(1.5..4.0);
        let a = if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(-1.2..1.2) };
        prof.push((d, a));
        t += d;
    }
    prof
}

fn track_from(id: u32, ty: AgentType, path: &Path, s: &[f64]) -> AgentTrack {
    let (length, width) = ty.default_footprint();
    let states = s
        .iter()
        .enumerate()
        .map(|(k, &si)| AgentState { pose: path.pose_at(si), ts: k as f64 * NATIVE_DT - 1.0 })
        .collect();
    AgentTrack { id, ty, length, width, states, valid: vec![true; s.len()] }
}

fn clears(a: &AgentTrack, others: &[Placed]) -> bool {
    for o in others {
        for k in 0..NATIVE_STEPS {
            let ba = OrientedBox {
                center: a.states[k].pose,
                length: a.length + SAFETY_INFLATION.0,
                width: a.width + SAFETY_INFLATION.1,
            };
            let bo = OrientedBox {
                center: o.track.states[k].pose,
                length: o.track.length + SAFETY_INFLATION.0,
                width: o.track.width + SAFETY_INFLATION.1,
            };
            if obb_intersects(&ba, &bo) {
                return false;
            }
        }
    }
    true
}

/// Keeps the agent's footprint away from every road-edge polyline.
fn stays_on_road(a: &AgentTrack, edges: &[Polyline]) -> bool {
    let margin = 0.1;
    for st in a.states.iter().step_by(2) {
        let b = a.footprint(st.pose);
        for c in b.corners() {
            if edges.iter().any(|e| e.distance_to(c) < margin) {
                return false;
            }
        }
    }
    true
}

pub fn generate_scenario(template: Template, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ template.salt());
    let road = match template {
        Template::Straight => straight_road(&mut rng),
        Template::Curve => curve_road(&mut rng),
        Template::Intersection => intersection_road(),
        Template::Merge => merge_road(),
    };
    let edge_lines: Vec<Polyline> = road.edges.iter().map(|e| Polyline::new(e.clone()).unwrap()).collect();

    let hazard = matches!(template, Template::Intersection | Template::Merge);
    let n_movers = rng.gen_range(3..=5usize);
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_movers && attempts < 400 {
        attempts += 1;
        let lane_idx = rng.gen_range(0..road.lanes.len());
        let lane = &road.lanes[lane_idx];
        let ty = if !hazard && rng.gen_bool(0.15) { AgentType::Cyclist } else { AgentType::Vehicle };
        let vmax = if ty == AgentType::Cyclist { 7.0 } else { 13.0 };
        let v0 = rng.gen_range(3.0..vmax - 1.0);
        let arrive = rng.gen_range(2.0..6.5);
        let s0 = if hazard { (lane.conflict_s - v0 * arrive).max(2.0) } else { rng.gen_range(5.0..lane.path.length() * 0.45) };
        let mut plan = Plan { s0, v0, vmax, profile: random_profile(&mut rng), brake: rng.gen_range(1.5..3.0), stop: None };
        if hazard {
            // approach the conflict zone without large speed swings
            for p in &mut plan.profile {
                p.1 = p.1.clamp(-0.6, 0.6);
            }
        }
        let id = placed.len() as u32 + 1;
        let mut candidates = vec![plan.clone()];
        if let Some(stop_s) = lane.stop_s {
            if stop_s > s0 + 3.0 {
                for wait in [0.5, 1.5, 2.5, 3.5, 5.0] {
                    let mut p = plan.clone();
                    p.stop = Some(Stop { s_stop: stop_s, wait, go_accel: rng.gen_range(1.2..2.5), v_target: v0.max(6.0).min(vmax) });
                    candidates.push(p);
                }
            }
        }
        for (ci, cand) in candidates.iter().enumerate() {
            let s = simulate(cand);
            let track = track_from(id, ty, &lane.path, &s);
            if clears(&track, &placed) && stays_on_road(&track, &edge_lines) {
                placed.push(Placed { track, lane: lane_idx, yielded: ci > 0 });
                break;
            }
        }
    }
    // two movers are always placeable: far apart on distinct positions of lane 0
    while placed.len() < 2 {
        let id = placed.len() as u32 + 1;
        let lane = &road.lanes[0];
        let s0 = 5.0 + 60.0 * placed.len() as f64;
        let plan = Plan { s0, v0: 5.0, vmax: 5.0, profile: vec![], brake: 2.0, stop: None };
        let track = track_from(id, AgentType::Vehicle, &lane.path, &simulate(&plan));
        placed.push(Placed { track, lane: 0, yielded: false });
    }

    // interest set: yielders and the agents on other lanes first
    let n_interest = rng.gen_range(2..=4usize).min(placed.len());
    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.sort_by_key(|&i| (!placed[i].yielded, placed[i].lane, i));
    let mut interest: Vec<usize> = Vec::new();
    for &i in &order {
        if interest.len() == n_interest {
            break;
        }
        if placed[i].yielded || interest.iter().all(|&j| placed[j].lane != placed[i].lane) {
            interest.push(i);
        }
    }
    for &i in &order {
        if interest.len() == n_interest {
            break;
        }
        if !interest.contains(&i) {
            interest.push(i);
        }
    }
    interest.sort_unstable();

    let mut agents: Vec<AgentTrack> = placed.into_iter().map(|p| p.track).collect();
    let interest_ids = interest.iter().map(|&i| agents[i].id).collect();

    // pedestrians on distinct sidewalks, outside the road edges
    let n_ped = rng.gen_range(0..=2usize).min(road.sidewalks.len());
    let first_walk = rng.gen_range(0..road.sidewalks.len());
    for k in 0..n_ped {
        let walk = &road.sidewalks[(first_walk + k) % road.sidewalks.len()];
        let v = rng.gen_range(0.8..1.6);
        let plan = Plan { s0: rng.gen_range(0.0..(walk.length() - 20.0).max(1.0)), v0: v, vmax: v, profile: vec![], brake: 1.0, stop: None };
        let s = simulate(&plan);
        let id = agents.len() as u32 + 1;
        agents.push(track_from(id, AgentType::Pedestrian, walk, &s));
    }

    let mut raw: Vec<(Polyline, MapType)> = Vec::new();
    for lane in road.lanes.iter().map(|l| &l.path).chain(road.map_lanes.iter()) {
        raw.push((Polyline::new(lane.sample(1.0, 0.0)).unwrap(), MapType::Lane));
    }
    for e in edge_lines {
        raw.push((e, MapType::RoadEdge));
    }
    let map_elements = segment_map(&raw).expect("generated polylines exceed 1 m");

    Scenario { map_elements, agents, interest_ids, anchor_time: 1.0, horizon: 8.0 }
}

fn straight_road(rng: &mut ChaCha8Rng) -> Road {
    let x0 = -40.0;
    let len = 150.0;
    let lanes = [-HALF_LANE, HALF_LANE]
        .iter()
        .map(|&y| Lane { path: Path::line(Vec2::new(x0, y), 0.0, len), stop_s: None, conflict_s: 60.0 })
        .collect();
    let edges = [-LANE_WIDTH, LANE_WIDTH]
        .iter()
        .map(|&y| Path::line(Vec2::new(x0, y), 0.0, len).sample(1.0, 0.0))
        .collect();
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let sidewalks = vec![Path::line(Vec2::new(x0, side * (LANE_WIDTH + 1.5)), 0.0, len)];
    Road { lanes, map_lanes: vec![], edges, sidewalks }
}

fn curve_road(rng: &mut ChaCha8Rng) -> Road {
    let radius: f64 = rng.gen_range(35.0..70.0);
    let dir: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let sweep = dir * (95.0 / radius).min(PI * 0.9);
    let center_line = |off: f64| {
        // off > 0 shifts left of the direction of travel
        let start = Vec2::new(-35.0, off);
        let r = radius - dir * off;
        Path::line(start, 0.0, 25.0).then_arc(r, sweep).then_line(25.0)
    };
    let lanes = [-HALF_LANE, HALF_LANE]
        .iter()
        .map(|&o| Lane { path: center_line(o), stop_s: None, conflict_s: 60.0 })
        .collect();
    let edges = [-LANE_WIDTH, LANE_WIDTH].iter().map(|&o| center_line(o).sample(1.0, 0.0)).collect();
    let sidewalks = vec![center_line(if dir > 0.0 { -LANE_WIDTH - 1.5 } else { LANE_WIDTH + 1.5 })];
    Road { lanes, map_lanes: vec![], edges, sidewalks }
}

/// Four-way crossing of two two-way roads at the origin, right-hand traffic.
fn intersection_road() -> Road {
    let leg = 45.0;
    let inner = LANE_WIDTH;
    // canonical approach: eastbound on y = -HALF_LANE, entering from the west
    let approach_start = Vec2::new(-leg, -HALF_LANE);
    let straight = Path::line(approach_start, 0.0, 2.0 * leg);
    let right_r = CURB_RADIUS + HALF_LANE;
    let right = Path::line(approach_start, 0.0, leg - inner - CURB_RADIUS).then_arc(right_r, -FRAC_PI_2).then_line(leg - inner - CURB_RADIUS);
    let left_r = 10.0;
    let left = Path::line(approach_start, 0.0, leg - (left_r - HALF_LANE)).then_arc(left_r, FRAC_PI_2).then_line(leg - (left_r - HALF_LANE));
    // vehicle centre stops with the front bumper at the crossing road's edge
    let stop_s = leg - inner - 2.5;
    let left_stop = leg - (left_r - HALF_LANE) - 0.5;
    let mut lanes = Vec::new();
    let mut map_lanes = Vec::new();
    for k in 0..4 {
        let rot = k as f64 * FRAC_PI_2;
        lanes.push(Lane { path: rotate_path(&straight, rot), stop_s: Some(stop_s), conflict_s: leg });
        let r = rotate_path(&right, rot);
        let l = rotate_path(&left, rot);
        lanes.push(Lane { path: l, stop_s: Some(left_stop), conflict_s: leg });
        map_lanes.push(r);
    }
    // curbs: one L-shaped corner per quadrant with a rounded inner corner
    let mut edges = Vec::new();
    let mut sidewalks = Vec::new();
    for k in 0..4 {
        let rot = k as f64 * FRAC_PI_2;
        // south-west corner in the canonical frame: from the west leg to the south leg
        let corner = Path::line(Vec2::new(-leg, -inner), 0.0, leg - inner - CURB_RADIUS)
            .then_arc(CURB_RADIUS, -FRAC_PI_2)
            .then_line(leg - inner - CURB_RADIUS);
        edges.push(rotate_path(&corner, rot).sample(1.0, 0.0));
        let walk = Path::line(Vec2::new(-leg, -inner - 2.0), 0.0, leg - inner - CURB_RADIUS - 4.0);
        sidewalks.push(rotate_path(&walk, rot));
    }
    Road { lanes, map_lanes, edges, sidewalks }
}

/// Two-lane main road with an on-ramp joining the right lane from below.
fn merge_road() -> Road {
    let x_start = -110.0;
    let x_end = 60.0;
    let main_len = x_end - x_start;
    let ramp_angle: f64 = 15f64.to_radians_nostd();
    let ramp_r = 60.0;
    // the ramp arc ends tangent to the right lane at x = 0
    let arc_dx = ramp_r * math::sin(ramp_angle);
    let arc_dy = ramp_r * (1.0 - math::cos(ramp_angle));
    let arc_start = Vec2::new(-arc_dx, -HALF_LANE - arc_dy);
    let line_len = 70.0;
    let ramp_start = arc_start - Vec2::new(math::cos(ramp_angle), math::sin(ramp_angle)) * line_len;
    let ramp = Path::line(ramp_start, ramp_angle, line_len).then_arc(ramp_r, -ramp_angle).then_line(x_end);
    let right = Path::line(Vec2::new(x_start, -HALF_LANE), 0.0, main_len);
    let left = Path::line(Vec2::new(x_start, HALF_LANE), 0.0, main_len);
    let merge_s = line_len + ramp_r * ramp_angle;
    let lanes = vec![
        Lane { path: right, stop_s: None, conflict_s: -x_start },
        Lane { path: left, stop_s: None, conflict_s: -x_start },
        Lane { path: ramp.clone(), stop_s: Some(merge_s - 14.0), conflict_s: merge_s },
    ];
    // right edge of the main road stops where the ramp's left edge meets it
    let ramp_left = ramp.sample(1.0, HALF_LANE);
    let cut = ramp_left.iter().position(|p| p.y >= -LANE_WIDTH).unwrap_or(ramp_left.len() - 1);
    let meet_x = ramp_left[cut].x;
    let mut ramp_left_edge: Vec<Vec2> = ramp_left[..cut].to_vec();
    ramp_left_edge.push(Vec2::new(meet_x, -LANE_WIDTH));
    let main_right = vec![Vec2::new(x_start, -LANE_WIDTH), Vec2::new(meet_x - 0.5, -LANE_WIDTH)];
    let ramp_right_edge = ramp.sample(1.0, -HALF_LANE);
    let main_left = Path::line(Vec2::new(x_start, LANE_WIDTH), 0.0, main_len).sample(1.0, 0.0);
    let sidewalks = vec![Path::line(Vec2::new(x_start, LANE_WIDTH + 1.5), 0.0, main_len)];
    Road {
        lanes,
        map_lanes: vec![],
        edges: vec![main_left, main_right, ramp_left_edge, ramp_right_edge],
        sidewalks,
    }
}

trait ToRadians {
    fn to_radians_nostd(self) -> f64;
}

impl ToRadians for f64 {
    fn to_radians_nostd(self) -> f64 {
        self * PI / 180.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_sampling_has_unit_chords() {
        let p = Path::line(Vec2::new(0.0, 0.0), 0.0, 5.0).then_arc(20.0, 1.0).then_line(5.0);
        let pts = p.sample(1.0, 0.0);
        for w in pts.windows(2).take(pts.len() - 2) {
            assert!((w[0].dist(w[1]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_plan_comes_to_rest_before_line() {
        let plan = Plan {
            s0: 0.0,
            v0: 10.0,
            vmax: 12.0,
            profile: vec![],
            brake: 2.0,
            stop: Some(Stop { s_stop: 40.0, wait: 2.0, go_accel: 2.0, v_target: 8.0 }),
        };
        let s = simulate(&plan);
        assert!(s.iter().take_while(|&&x| x < 40.0 - 1e-9).count() > 0);
        let peak_before_go = s.iter().copied().take(60).fold(0.0, f64::max);
        assert!(peak_before_go <= 40.0 + 1e-9, "{peak_before_go}");
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        let stopped = s.windows(2).filter(|w| w[1] == w[0]).count();
        assert!(stopped >= 15, "held for {stopped} steps");
    }

    #[test]
    fn templates_parse() {
        for t in Template::ALL {
            assert_eq!(Template::parse(t.name()), Some(t));
        }
        assert_eq!(Template::parse("roundabout"), None);
    }
}
