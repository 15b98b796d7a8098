//! Point clouds, label sets and banked objects, plus the scene operators:
//! object cropping, point removal `R(.)`, concatenation and random object
//! scaling.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::geom::{point_in_box, point_in_footprint, Box3D};

/// Footprint margin (m) used by [`remove_points_in_boxes`].
pub const REMOVAL_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudError {
    NonFinite { index: usize },
    NonPositiveScale,
}

impl fmt::Display for CloudError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CloudError::NonFinite { index } => write!(f, "point {index} has a non-finite coordinate"),
            CloudError::NonPositiveScale => f.write_str("scale factor must be positive"),
        }
    }
}

impl core::error::Error for CloudError {}

/// A lidar return. Intensity is carried through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn with_xyz(self, p: [f64; 3]) -> Self {
        Point {
            x: p[0],
            y: p[1],
            z: p[2],
            intensity: self.intensity,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        match self.points.iter().position(|p| !p.is_finite()) {
            Some(index) => Err(CloudError::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Number of points inside `b`.
    pub fn count_inside(&self, b: &Box3D) -> usize {
        self.points.iter().filter(|p| point_in_box(p.xyz(), b)).count()
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        PointCloud {
            points: iter.into_iter().collect(),
        }
    }
}

/// The boxes of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    pub frame_id: String,
    pub boxes: Vec<Box3D>,
}

impl LabelSet {
    pub fn new(frame_id: impl Into<String>, boxes: Vec<Box3D>) -> Self {
        LabelSet {
            frame_id: frame_id.into(),
            boxes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    SourceGt,
    TargetPseudo,
}

/// A cropped object: its box, its interior points in the box frame and where
/// it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectBankEntry {
    pub bbox: Box3D,
    /// Interior points, box-local coordinates.
    pub points: PointCloud,
    pub provenance: Provenance,
    pub origin_frame: String,
    pub obc: Option<u32>,
}

impl ObjectBankEntry {
    /// Crops the points of `bbox` out of `cloud`.
    pub fn from_scene(
        cloud: &PointCloud,
        bbox: Box3D,
        provenance: Provenance,
        origin_frame: impl Into<String>,
    ) -> Self {
        ObjectBankEntry {
            points: crop_object_points(cloud, &bbox),
            bbox,
            provenance,
            origin_frame: origin_frame.into(),
            obc: None,
        }
    }

    /// Interior points at the entry's recorded world pose.
    pub fn world_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.points
            .iter()
            .map(move |p| p.with_xyz(self.bbox.to_world(p.xyz())))
    }
}

/// Points of `cloud` inside `b`, in the box frame, in input order.
pub fn crop_object_points(cloud: &PointCloud, b: &Box3D) -> PointCloud {
    cloud
        .iter()
        .filter(|p| point_in_box(p.xyz(), b))
        .map(|p| p.with_xyz(b.to_local(p.xyz())))
        .collect()
}

/// `R(.)`: drops every point whose ground projection falls in any box
/// footprint grown by [`REMOVAL_MARGIN`], at any height.
pub fn remove_points_in_boxes(cloud: &PointCloud, boxes: &[Box3D]) -> PointCloud {
    remove_points_in_boxes_with_margin(cloud, boxes, REMOVAL_MARGIN)
}

pub fn remove_points_in_boxes_with_margin(
    cloud: &PointCloud,
    boxes: &[Box3D],
    margin: f64,
) -> PointCloud {
    if boxes.is_empty() {
        return cloud.clone();
    }
    cloud
        .iter()
        .filter(|p| !boxes.iter().any(|b| point_in_footprint(p.x, p.y, b, margin)))
        .copied()
        .collect()
}

/// `cloud (+) entries`: appends each entry's points at its box pose.
pub fn paste(cloud: &PointCloud, entries: &[ObjectBankEntry]) -> PointCloud {
    let extra: usize = entries.iter().map(|e| e.points.len()).sum();
    let mut points = Vec::with_capacity(cloud.len() + extra);
    points.extend_from_slice(&cloud.points);
    for e in entries {
        points.extend(e.world_points());
    }
    PointCloud { points }
}

/// Random object scaling: box dimensions and local points scaled by `factor`
/// about the box center.
pub fn ros_scale(entry: &ObjectBankEntry, factor: f64) -> Result<ObjectBankEntry, CloudError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CloudError::NonPositiveScale);
    }
    let points = entry
        .points
        .iter()
        .map(|p| p.with_xyz([p.x * factor, p.y * factor, p.z * factor]))
        .collect();
    Ok(ObjectBankEntry {
        bbox: entry.bbox.scaled(factor),
        points,
        provenance: entry.provenance,
        origin_frame: entry.origin_frame.clone(),
        obc: entry.obc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn car() -> Box3D {
        Box3D::new([5.0, 2.0, 0.75], [1.8, 4.2, 1.5], 0.4, 1).unwrap()
    }

    fn scene() -> PointCloud {
        let b = car();
        let mut pts = vec![Point::new(-20.0, -20.0, 0.1, 0.3), Point::new(30.0, 1.0, 0.0, 0.0)];
        for i in 0..10 {
            let t = i as f64 / 10.0 - 0.45;
            let w = b.to_world([t * 1.7, t * 4.0, t]);
            pts.push(Point::new(w[0], w[1], w[2], 0.5));
        }
        PointCloud::new(pts)
    }

    #[test]
    fn crop_returns_local_points() {
        let c = scene();
        let cropped = crop_object_points(&c, &car());
        assert_eq!(cropped.len(), 10);
        assert_abs_diff_eq!(cropped.points[0].x, -0.45 * 1.7, epsilon = 1e-9);
        assert_abs_diff_eq!(cropped.points[0].intensity, 0.5);

        let far = Box3D::new([100.0, 0.0, 0.0], [1.0; 3], 0.0, 1).unwrap();
        assert!(crop_object_points(&c, &far).is_empty());
    }

    #[test]
    fn removal_identity_and_full() {
        let c = scene();
        assert_eq!(remove_points_in_boxes(&c, &[]), c);
        let only_object: PointCloud = c.points[2..].iter().copied().collect();
        assert!(remove_points_in_boxes(&only_object, &[car()]).is_empty());
        assert_eq!(remove_points_in_boxes(&c, &[car()]).len(), 2);
    }

    #[test]
    fn removal_clears_full_height_column() {
        let b = car();
        let high = b.to_world([0.0, 0.0, 10.0]);
        let edge = b.to_world([0.95, 0.0, 0.0]);
        let c = PointCloud::new(vec![
            Point::new(high[0], high[1], high[2], 0.0),
            Point::new(edge[0], edge[1], edge[2], 0.0),
        ]);
        assert!(remove_points_in_boxes(&c, &[b]).is_empty());
    }

    #[test]
    fn paste_identity_and_round_trip() {
        let c = scene();
        assert_eq!(paste(&c, &[]), c);

        let entry = ObjectBankEntry::from_scene(&c, car(), Provenance::SourceGt, "f0");
        let pasted = paste(&PointCloud::default(), core::slice::from_ref(&entry));
        assert_eq!(pasted.len(), 10);
        for (p, q) in pasted.iter().zip(&c.points[2..]) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-9);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-9);
            assert_abs_diff_eq!(p.z, q.z, epsilon = 1e-9);
            assert!(point_in_box(p.xyz(), &entry.bbox));
        }
    }

    #[test]
    fn ros_scaling() {
        let mut entry = ObjectBankEntry::from_scene(&scene(), car(), Provenance::SourceGt, "f0");
        assert_eq!(ros_scale(&entry, 1.0).unwrap(), entry);
        assert_eq!(ros_scale(&entry, 0.0), Err(CloudError::NonPositiveScale));
        assert_eq!(ros_scale(&entry, -1.0), Err(CloudError::NonPositiveScale));

        entry.bbox = Box3D::new([0.0; 3], [1.0, 2.0, 1.0], 0.0, 1).unwrap();
        entry.points = PointCloud::new(vec![Point::new(0.25, 0.0, 0.0, 0.7)]);
        let s = ros_scale(&entry, 2.0).unwrap();
        assert_eq!((s.bbox.w, s.bbox.l, s.bbox.h), (2.0, 4.0, 2.0));
        assert_eq!(s.points.points[0], Point::new(0.5, 0.0, 0.0, 0.7));
        assert_eq!(s.bbox.center(), entry.bbox.center());
        assert_eq!(s.bbox.yaw, entry.bbox.yaw);
    }

    #[test]
    fn validate_flags_nan() {
        let c = PointCloud::new(vec![Point::default(), Point::new(f64::NAN, 0.0, 0.0, 0.0)]);
        assert_eq!(c.validate(), Err(CloudError::NonFinite { index: 1 }));
    }
}
