//! Oriented 3D boxes and the exact geometry built on them.
//!
//! Boxes rotate about the vertical axis only. In the box frame the width `w`
//! spans the local x axis, the length `l` the local y axis and the height `h`
//! the z axis. BEV overlap is computed by clipping the two footprint
//! rectangles against each other (Sutherland-Hodgman) and taking the shoelace
//! area of the result.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::math;

/// Intersections smaller than this (m^2) are treated as empty.
pub const AREA_EPSILON: f64 = 1e-12;

/// Slack (m) applied to the box faces by [`point_in_box`].
pub const CONTAINMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomError {
    NonFinite,
    NonPositiveDimension,
    ScoreOutOfRange,
    ZeroClass,
    DegeneratePolygon,
    NonConvexPolygon,
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            GeomError::NonFinite => "box has a non-finite field",
            GeomError::NonPositiveDimension => "box dimensions must be positive",
            GeomError::ScoreOutOfRange => "score must lie in [0, 1]",
            GeomError::ZeroClass => "class ids start at 1",
            GeomError::DegeneratePolygon => "polygon needs at least 3 vertices and positive area",
            GeomError::NonConvexPolygon => "polygon is not convex and counter-clockwise",
        };
        f.write_str(msg)
    }
}

impl core::error::Error for GeomError {}

/// Which overlap measure a stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouKind {
    #[default]
    Bev,
    ThreeD,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let r = math::rem_euclid(yaw + PI, 2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

/// An oriented 3D bounding box `(x, y, z, w, l, h, yaw, class)` with an
/// optional confidence score. Ground-truth boxes carry no score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: u32,
    pub score: Option<f64>,
}

impl Box3D {
    /// Builds a validated box; `yaw` is normalized into `(-pi, pi]`.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class_id: u32) -> Result<Self, GeomError> {
        let b = Box3D {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w: dims[0],
            l: dims[1],
            h: dims[2],
            yaw: normalize_yaw(yaw),
            class_id,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, GeomError> {
        self.score = Some(score);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let fields = [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(GeomError::NonPositiveDimension);
        }
        if self.class_id == 0 {
            return Err(GeomError::ZeroClass);
        }
        match self.score {
            Some(s) if !(0.0..=1.0).contains(&s) => Err(GeomError::ScoreOutOfRange),
            _ => Ok(()),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn footprint_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Horizontal distance from the sensor origin.
    pub fn range(&self) -> f64 {
        math::sqrt(self.cx * self.cx + self.cy * self.cy)
    }

    /// World point into the box frame (translate by -center, rotate by -yaw).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = math::sin_cos(self.yaw);
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Box-frame point back into the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = math::sin_cos(self.yaw);
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    /// Same pose, dimensions multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Box3D {
        Box3D {
            w: self.w * factor,
            l: self.l * factor,
            h: self.h * factor,
            ..*self
        }
    }

    /// Same pose with the footprint grown by `margin` on every side.
    pub fn enlarged_bev(&self, margin: f64) -> Box3D {
        Box3D {
            w: self.w + 2.0 * margin,
            l: self.l + 2.0 * margin,
            ..*self
        }
    }

    fn same_footprint(&self, other: &Box3D) -> bool {
        self.cx == other.cx
            && self.cy == other.cy
            && self.w == other.w
            && self.l == other.l
            && self.yaw == other.yaw
    }
}

/// Convex counter-clockwise polygon in the ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPolygon {
    vertices: Vec<[f64; 2]>,
}

impl BevPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, GeomError> {
        if vertices.len() < 3 || signed_area(&vertices) <= 0.0 {
            return Err(GeomError::DegeneratePolygon);
        }
        let n = vertices.len();
        for i in 0..n {
            let turn = cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if turn < -AREA_EPSILON {
                return Err(GeomError::NonConvexPolygon);
            }
        }
        Ok(BevPolygon { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }
}

/// The four footprint corners, counter-clockwise.
pub fn bev_corners(b: &Box3D) -> BevPolygon {
    BevPolygon {
        vertices: corner_array(b).to_vec(),
    }
}

fn corner_array(b: &Box3D) -> [[f64; 2]; 4] {
    let hw = 0.5 * b.w;
    let hl = 0.5 * b.l;
    let local = [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]];
    let (s, c) = math::sin_cos(b.yaw);
    local.map(|[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
}

#[inline]
fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn signed_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    let mut twice = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice
}

/// Sutherland-Hodgman: clips `subject` by every edge of the convex CCW `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = core::mem::take(&mut output);
        let len = input.len();
        for j in 0..len {
            let cur = input[j];
            let prev = input[(j + len - 1) % len];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            if dc >= 0.0 {
                if dp < 0.0 {
                    output.push(edge_crossing(prev, cur, dp, dc));
                }
                output.push(cur);
            } else if dp >= 0.0 {
                output.push(edge_crossing(prev, cur, dp, dc));
            }
        }
    }
    output
}

#[inline]
fn edge_crossing(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let clipped = clip_convex(a, b);
    if clipped.len() < 3 {
        return 0.0;
    }
    let area = signed_area(&clipped);
    if area < AREA_EPSILON {
        0.0
    } else {
        area
    }
}

/// Area of the intersection of two convex polygons.
pub fn convex_intersection_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    intersection_area(&a.vertices, &b.vertices)
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    intersection_area(&corner_array(a), &corner_array(b))
}

/// Intersection over union of the two footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a.same_footprint(b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    ratio(inter, a.footprint_area() + b.footprint_area() - inter)
}

/// Volumetric intersection over union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a.same_footprint(b) && a.cz == b.cz && a.h == b.h {
        return 1.0;
    }
    let overlap_h = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_h;
    ratio(inter, a.volume() + b.volume() - inter)
}

pub fn iou(kind: IouKind, a: &Box3D, b: &Box3D) -> f64 {
    match kind {
        IouKind::Bev => bev_iou(a, b),
        IouKind::ThreeD => iou_3d(a, b),
    }
}

#[inline]
fn ratio(inter: f64, union: f64) -> f64 {
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// True iff `p` lies in the closed box.
pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let q = b.to_local(p);
    math::abs(q[0]) <= 0.5 * b.w + CONTAINMENT_TOLERANCE
        && math::abs(q[1]) <= 0.5 * b.l + CONTAINMENT_TOLERANCE
        && math::abs(q[2]) <= 0.5 * b.h + CONTAINMENT_TOLERANCE
}

/// True iff the ground projection of `(x, y)` lies in the footprint of `b`
/// grown by `margin` on every side.
pub fn point_in_footprint(x: f64, y: f64, b: &Box3D, margin: f64) -> bool {
    let q = b.to_local([x, y, b.cz]);
    math::abs(q[0]) <= 0.5 * b.w + margin + CONTAINMENT_TOLERANCE
        && math::abs(q[1]) <= 0.5 * b.l + margin + CONTAINMENT_TOLERANCE
}

/// Survivors of greedy NMS and, for each survivor, the candidates it absorbed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NmsResult {
    /// Survivor indices in the order they were selected (descending score).
    pub kept: Vec<usize>,
    /// `groups[k]` holds `kept[k]` and every candidate it suppressed, ascending.
    pub groups: Vec<Vec<usize>>,
}

/// Greedy descending-score NMS on BEV IoU. A candidate is suppressed when its
/// IoU with an already selected box exceeds `iou_thresh`. Equal scores go to
/// the lower index. Missing scores rank as 0.
pub fn nms(candidates: &[Box3D], iou_thresh: f64) -> NmsResult {
    let n = candidates.len();
    let score = |i: usize| candidates[i].score.unwrap_or(0.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| score(j).total_cmp(&score(i)).then(i.cmp(&j)));

    let corners: Vec<[[f64; 2]; 4]> = candidates.iter().map(corner_array).collect();
    let mut suppressed = vec![false; n];
    let mut out = NmsResult::default();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        suppressed[i] = true;
        let mut group = vec![i];
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let overlap = if candidates[i].same_footprint(&candidates[j]) {
                1.0
            } else {
                let inter = intersection_area(&corners[i], &corners[j]);
                ratio(
                    inter,
                    candidates[i].footprint_area() + candidates[j].footprint_area() - inter,
                )
            };
            if overlap > iou_thresh {
                suppressed[j] = true;
                group.push(j);
            }
        }
        group.sort_unstable();
        out.kept.push(i);
        out.groups.push(group);
    }
    out
}
