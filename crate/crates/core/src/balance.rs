//! Class-balanced injection of banked objects into target frames, and the
//! progressive schedule that shifts the mix from source ground truth towards
//! curated pseudo labels.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::Rng;

use crate::cloud::{
    paste, remove_points_in_boxes, ros_scale, CloudError, LabelSet, ObjectBankEntry, PointCloud,
    Provenance,
};
use crate::geom::{bev_intersection_area, Box3D};

/// Default range of the random object scaling factor.
pub const DEFAULT_ROS_RANGE: (f64, f64) = (0.75, 1.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceError {
    MixedProvenance,
    InvalidRosRange,
}

impl fmt::Display for BalanceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceError::MixedProvenance => f.write_str("object pool mixes provenances"),
            BalanceError::InvalidRosRange => f.write_str("scaling range must satisfy 0 < lo <= hi"),
        }
    }
}

impl core::error::Error for BalanceError {}

impl From<CloudError> for BalanceError {
    fn from(_: CloudError) -> Self {
        BalanceError::InvalidRosRange
    }
}

/// Per-class sample counts for curated pseudo labels (`s_r`) and source
/// ground truth (`s_g`), and the step applied between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSchedule {
    pub s_r: u32,
    pub s_g: u32,
    pub s_delta: u32,
    pub round_index: u32,
}

impl RoundSchedule {
    pub fn new(s_r: u32, s_g: u32, s_delta: u32) -> Self {
        RoundSchedule {
            s_r,
            s_g,
            s_delta,
            round_index: 0,
        }
    }

    pub fn advance(&self) -> Self {
        advance_schedule(self)
    }
}

impl Default for RoundSchedule {
    fn default() -> Self {
        RoundSchedule::new(5, 10, 2)
    }
}

pub fn advance_schedule(s: &RoundSchedule) -> RoundSchedule {
    RoundSchedule {
        s_r: s.s_r + s.s_delta,
        s_g: s.s_g.saturating_sub(s.s_delta),
        s_delta: s.s_delta,
        round_index: s.round_index + 1,
    }
}

/// Banked objects of a single provenance, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPool {
    provenance: Provenance,
    by_class: BTreeMap<u32, Vec<ObjectBankEntry>>,
}

impl ObjectPool {
    pub fn new(provenance: Provenance) -> Self {
        ObjectPool {
            provenance,
            by_class: BTreeMap::new(),
        }
    }

    pub fn from_entries(
        provenance: Provenance,
        entries: impl IntoIterator<Item = ObjectBankEntry>,
    ) -> Result<Self, BalanceError> {
        let mut pool = ObjectPool::new(provenance);
        for e in entries {
            pool.push(e)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, entry: ObjectBankEntry) -> Result<(), BalanceError> {
        if entry.provenance != self.provenance {
            return Err(BalanceError::MixedProvenance);
        }
        self.by_class.entry(entry.bbox.class_id).or_default().push(entry);
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn class(&self, class_id: u32) -> &[ObjectBankEntry] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_len(&self, class_id: u32) -> usize {
        self.class(class_id).len()
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectBankEntry> {
        self.by_class.values().flatten()
    }
}

/// Crops every labeled box of a frame into a bank entry.
pub fn bank_objects(
    cloud: &PointCloud,
    labels: &LabelSet,
    provenance: Provenance,
) -> Vec<ObjectBankEntry> {
    labels
        .boxes
        .iter()
        .map(|b| ObjectBankEntry::from_scene(cloud, *b, provenance, labels.frame_id.as_str()))
        .collect()
}

/// What one class contributed to a balanced draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassDraw {
    pub class_id: u32,
    pub requested: usize,
    /// Eligible pool entries for this class.
    pub available: usize,
    /// `min(requested, available)`.
    pub drawn: usize,
}

impl ClassDraw {
    pub fn shortfall(&self) -> usize {
        self.requested - self.drawn
    }
}

/// Draws `min(per_class, |pool_c|)` entries uniformly without replacement for
/// every class `c` in `1..=num_classes`.
pub fn sample_balanced<R: Rng + ?Sized>(
    pool: &ObjectPool,
    per_class: usize,
    num_classes: u32,
    rng: &mut R,
) -> (Vec<ObjectBankEntry>, Vec<ClassDraw>) {
    sample_balanced_excluding(pool, per_class, num_classes, None, rng)
}

/// As [`sample_balanced`], skipping entries cropped from `exclude_origin`.
pub fn sample_balanced_excluding<R: Rng + ?Sized>(
    pool: &ObjectPool,
    per_class: usize,
    num_classes: u32,
    exclude_origin: Option<&str>,
    rng: &mut R,
) -> (Vec<ObjectBankEntry>, Vec<ClassDraw>) {
    let mut drawn = Vec::new();
    let mut report = Vec::with_capacity(num_classes as usize);
    for class_id in 1..=num_classes {
        let eligible: Vec<&ObjectBankEntry> = pool
            .class(class_id)
            .iter()
            .filter(|e| exclude_origin != Some(e.origin_frame.as_str()))
            .collect();
        let take = per_class.min(eligible.len());
        if take > 0 {
            for i in index::sample(rng, eligible.len(), take) {
                drawn.push(eligible[i].clone());
            }
        }
        report.push(ClassDraw {
            class_id,
            requested: per_class,
            available: eligible.len(),
            drawn: take,
        });
    }
    (drawn, report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectedObject {
    pub bbox: Box3D,
    pub provenance: Provenance,
}

/// A frame after injection, with the placement log.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionOutcome {
    pub cloud: PointCloud,
    pub labels: LabelSet,
    pub placed: Vec<InjectedObject>,
    pub rejected: Vec<InjectedObject>,
}

impl InjectionOutcome {
    pub fn placed_count(&self, class_id: u32, provenance: Provenance) -> usize {
        count(&self.placed, class_id, provenance)
    }

    pub fn rejected_count(&self, class_id: u32, provenance: Provenance) -> usize {
        count(&self.rejected, class_id, provenance)
    }
}

fn count(objs: &[InjectedObject], class_id: u32, provenance: Provenance) -> usize {
    objs.iter()
        .filter(|o| o.bbox.class_id == class_id && o.provenance == provenance)
        .count()
}

/// Injects curated pseudo-labeled objects and (ROS-scaled) source objects at
/// their recorded poses. Candidates are tried in order, ReD first; one whose
/// footprint overlaps any box already in the frame is rejected. Accepted
/// candidates clear the background under their footprints, contribute their
/// points and append their boxes to the labels.
pub fn inject<R: Rng + ?Sized>(
    cloud: &PointCloud,
    labels: &LabelSet,
    red_entries: &[ObjectBankEntry],
    gt_entries: &[ObjectBankEntry],
    ros_range: (f64, f64),
    rng: &mut R,
) -> Result<InjectionOutcome, BalanceError> {
    let (lo, hi) = ros_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(BalanceError::InvalidRosRange);
    }
    let mut candidates: Vec<ObjectBankEntry> = red_entries.to_vec();
    for e in gt_entries {
        let factor = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        candidates.push(ros_scale(e, factor)?);
    }

    let mut boxes = labels.boxes.clone();
    let mut accepted: Vec<ObjectBankEntry> = Vec::new();
    let mut placed = Vec::new();
    let mut rejected = Vec::new();
    for c in candidates {
        let obj = InjectedObject {
            bbox: c.bbox,
            provenance: c.provenance,
        };
        if boxes.iter().any(|b| bev_intersection_area(b, &c.bbox) > 0.0) {
            rejected.push(obj);
        } else {
            boxes.push(c.bbox);
            placed.push(obj);
            accepted.push(c);
        }
    }

    let footprints: Vec<Box3D> = accepted.iter().map(|e| e.bbox).collect();
    let cleared = remove_points_in_boxes(cloud, &footprints);
    Ok(InjectionOutcome {
        cloud: paste(&cleared, &accepted),
        labels: LabelSet::new(labels.frame_id.clone(), boxes),
        placed,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use crate::geom::bev_iou;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(class_id: u32, cx: f64, origin: &str, provenance: Provenance) -> ObjectBankEntry {
        ObjectBankEntry {
            bbox: Box3D::new([cx, 0.0, 0.5], [1.0, 2.0, 1.0], 0.0, class_id).unwrap(),
            points: PointCloud::new(vec![Point::new(0.1, 0.2, 0.0, 0.5)]),
            provenance,
            origin_frame: origin.to_string(),
            obc: None,
        }
    }

    #[test]
    fn schedule_steps() {
        let s = RoundSchedule::new(5, 10, 2);
        let n = s.advance();
        assert_eq!((n.s_r, n.s_g, n.round_index), (7, 8, 1));
        let c = advance_schedule(&RoundSchedule::new(9, 0, 2));
        assert_eq!((c.s_r, c.s_g), (11, 0));
        let fixed = RoundSchedule::new(3, 4, 0);
        let mut cur = fixed;
        for _ in 0..10 {
            cur = cur.advance();
        }
        assert_eq!((cur.s_r, cur.s_g, cur.round_index), (3, 4, 10));
    }

    #[test]
    fn pool_rejects_mixed_provenance() {
        let mut pool = ObjectPool::new(Provenance::SourceGt);
        assert!(pool.push(entry(1, 0.0, "a", Provenance::SourceGt)).is_ok());
        assert_eq!(
            pool.push(entry(1, 0.0, "a", Provenance::TargetPseudo)),
            Err(BalanceError::MixedProvenance)
        );
    }

    fn pool_with(sizes: &[(u32, usize)]) -> ObjectPool {
        let mut pool = ObjectPool::new(Provenance::TargetPseudo);
        for &(class_id, n) in sizes {
            for i in 0..n {
                let origin = if i % 2 == 0 { "even" } else { "odd" };
                pool.push(entry(class_id, i as f64 * 3.0, origin, Provenance::TargetPseudo))
                    .unwrap();
            }
        }
        pool
    }

    #[test]
    fn balanced_sampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = pool_with(&[(1, 10), (2, 10), (3, 10)]);
        let (none, _) = sample_balanced(&pool, 0, 3, &mut rng);
        assert!(none.is_empty());

        let (drawn, report) = sample_balanced(&pool, 5, 3, &mut rng);
        for c in 1..=3 {
            assert_eq!(drawn.iter().filter(|e| e.bbox.class_id == c).count(), 5);
        }
        assert!(report.iter().all(|r| r.drawn == 5 && r.shortfall() == 0));

        let small = pool_with(&[(1, 10), (3, 3)]);
        let (drawn, report) = sample_balanced(&small, 5, 3, &mut rng);
        assert_eq!(drawn.iter().filter(|e| e.bbox.class_id == 3).count(), 3);
        assert_eq!(report[1], ClassDraw { class_id: 2, requested: 5, available: 0, drawn: 0 });
        assert_eq!(report[2].shortfall(), 2);
    }

    #[test]
    fn sampling_is_without_replacement_and_respects_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = pool_with(&[(1, 10)]);
        let (drawn, report) = sample_balanced_excluding(&pool, 10, 1, Some("even"), &mut rng);
        assert_eq!(report[0].available, 5);
        assert_eq!(drawn.len(), 5);
        assert!(drawn.iter().all(|e| e.origin_frame == "odd"));
        let mut xs: Vec<i64> = drawn.iter().map(|e| e.bbox.cx as i64).collect();
        xs.sort_unstable();
        xs.dedup();
        assert_eq!(xs.len(), 5);
    }

    #[test]
    fn injection_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = PointCloud::new(vec![Point::new(1.0, 1.0, 0.0, 0.0)]);
        let labels = LabelSet::new("f", vec![]);
        let out = inject(&cloud, &labels, &[], &[], DEFAULT_ROS_RANGE, &mut rng).unwrap();
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.labels, labels);
        assert!(out.placed.is_empty() && out.rejected.is_empty());
    }

    #[test]
    fn overlapping_candidates_first_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.2, 0.0), Point::new(50.0, 0.0, 0.0, 0.0)]);
        let labels = LabelSet::new("f", vec![]);
        let a = entry(1, 0.0, "x", Provenance::TargetPseudo);
        let b = entry(2, 0.5, "y", Provenance::TargetPseudo);
        let out = inject(&cloud, &labels, &[a.clone(), b], &[], DEFAULT_ROS_RANGE, &mut rng).unwrap();
        assert_eq!(out.placed.len(), 1);
        assert_eq!(out.placed[0].bbox, a.bbox);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected_count(2, Provenance::TargetPseudo), 1);
        // background point under a was cleared, a's own point pasted
        assert_eq!(out.cloud.len(), 2);
        assert_eq!(out.labels.boxes, vec![a.bbox]);
    }

    #[test]
    fn gt_candidates_get_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = entry(1, 0.0, "s", Provenance::SourceGt);
        let out = inject(
            &PointCloud::default(),
            &LabelSet::new("f", vec![]),
            &[],
            core::slice::from_ref(&g),
            (0.8, 1.2),
            &mut rng,
        )
        .unwrap();
        let placed = out.placed[0].bbox;
        let factor = placed.w / g.bbox.w;
        assert!((0.8..=1.2).contains(&factor));
        assert!((placed.l / g.bbox.l - factor).abs() < 1e-12);
        assert_eq!(placed.center(), g.bbox.center());
        assert!(inject(&PointCloud::default(), &out.labels, &[], &[], (0.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn existing_labels_block_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let existing = entry(1, 0.0, "f", Provenance::TargetPseudo).bbox;
        let labels = LabelSet::new("f", vec![existing]);
        let cands: Vec<_> = (0..6)
            .map(|i| entry(1 + i % 3, i as f64 * 0.8, "g", Provenance::TargetPseudo))
            .collect();
        let out = inject(&PointCloud::default(), &labels, &cands, &[], DEFAULT_ROS_RANGE, &mut rng).unwrap();
        assert_eq!(out.placed.len() + out.rejected.len(), 6);
        let boxes = &out.labels.boxes;
        for (i, a) in boxes.iter().enumerate() {
            for b in &boxes[i + 1..] {
                assert_eq!(bev_iou(a, b), 0.0);
            }
        }
    }
}
