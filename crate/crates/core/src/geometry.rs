//! Planar rigid-body math and collision primitives.

use alloc::vec::Vec;
use core::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::math::{self, normalize_angle};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline has repeated consecutive point at index {0}")]
    RepeatedPoint(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("box extents must be positive (length {length}, width {width})")]
    BadExtent { length: f64, width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        math::hypot(self.x, self.y)
    }

    #[inline]
    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise rotation by `angle`.
    #[inline]
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = math::sin_cos(angle);
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    #[inline]
    pub fn angle(self) -> f64 {
        math::atan2(self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Planar pose; heading is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: normalize_angle(heading) }
    }

    #[inline]
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Expresses a world-frame pose in this frame.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let p = transform_to_frame(other.position(), self);
        Pose2::new(p.x, p.y, other.heading - self.heading)
    }

    /// Inverse of [`Pose2::relative`]: maps a pose given in this frame back to the world.
    pub fn compose(&self, local: &Pose2) -> Pose2 {
        let p = transform_from_frame(local.position(), self);
        Pose2::new(p.x, p.y, self.heading + local.heading)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

/// World point into the local coordinates of `frame`.
#[inline]
pub fn transform_to_frame(point: Vec2, frame: &Pose2) -> Vec2 {
    (point - frame.position()).rotate(-frame.heading)
}

/// Local point of `frame` back into world coordinates.
#[inline]
pub fn transform_from_frame(local: Vec2, frame: &Pose2) -> Vec2 {
    local.rotate(frame.heading) + frame.position()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2, length: f64, width: f64) -> Result<Self, GeometryError> {
        if !(length > 0.0 && width > 0.0) {
            return Err(GeometryError::BadExtent { length, width });
        }
        if !center.is_finite() || !length.is_finite() || !width.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { center, length, width })
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            Vec2::new(hl, hw),
            Vec2::new(-hl, hw),
            Vec2::new(-hl, -hw),
            Vec2::new(hl, -hw),
        ]
        .map(|c| transform_from_frame(c, &self.center))
    }

    fn axes(&self) -> [Vec2; 2] {
        let (s, c) = math::sin_cos(self.center.heading);
        [Vec2::new(c, s), Vec2::new(-s, c)]
    }

    /// Closed-set point containment.
    pub fn contains(&self, p: Vec2) -> bool {
        let l = transform_to_frame(p, &self.center);
        math::abs(l.x) <= 0.5 * self.length && math::abs(l.y) <= 0.5 * self.width
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let d = c.dot(axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Separating-axis test over the four face normals. Touching boxes intersect.
pub fn obb_intersects(a: &OrientedBox, b: &OrientedBox) -> bool {
    // cheap reject on circumscribed circles
    let ra = 0.5 * math::hypot(a.length, a.width);
    let rb = 0.5 * math::hypot(b.length, b.width);
    if a.center.position().dist(b.center.position()) > ra + rb {
        return false;
    }
    let ca = a.corners();
    let cb = b.corners();
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (alo, ahi) = project(&ca, axis);
        let (blo, bhi) = project(&cb, axis);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Vec2>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        for i in 1..points.len() {
            if points[i] == points[i - 1] {
                return Err(GeometryError::RepeatedPoint(i));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn segments(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| a.dist(b)).sum()
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let mut acc = 0.0;
        for (a, b) in self.segments() {
            let l = a.dist(b);
            if s <= acc + l {
                let t = ((s - acc) / l).clamp(0.0, 1.0);
                return a + (b - a) * t;
            }
            acc += l;
        }
        *self.points.last().unwrap()
    }

    /// Shortest distance from `p` to the polyline.
    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.segments()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

#[inline]
fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

#[inline]
fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segment intersection; collinear overlap and shared endpoints count.
pub fn segments_intersect(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> bool {
    let d1 = orient(q0, q1, p0);
    let d2 = orient(q0, q1, p1);
    let d3 = orient(p0, p1, q0);
    let d4 = orient(p0, p1, q1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q0, q1, p0))
        || (d2 == 0.0 && on_segment(q0, q1, p1))
        || (d3 == 0.0 && on_segment(p0, p1, q0))
        || (d4 == 0.0 && on_segment(p0, p1, q1))
}

/// True iff the segment `p0 -> p1` touches any piece of `boundary`.
pub fn segment_crosses_polyline(p0: Vec2, p1: Vec2, boundary: &Polyline) -> bool {
    boundary.segments().any(|(a, b)| segments_intersect(p0, p1, a, b))
}
