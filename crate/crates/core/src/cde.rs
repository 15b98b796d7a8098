//! Cross-domain examination.
//!
//! The points inside each pseudo box of a target frame are pasted, at their
//! original pose, into a randomly drawn source scene whose points under the
//! pasted footprints have been cleared. The detector is run on that scene and
//! a pseudo box survives only if a confident same-class prediction overlaps it
//! with IoU of at least `delta_cde`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::balance::bank_objects;
use crate::cloud::{paste, remove_points_in_boxes, LabelSet, ObjectBankEntry, PointCloud, Provenance};
use crate::detection::InferenceResult;
use crate::geom::{bev_intersection_area, iou, Box3D, IouKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdeError {
    InvalidThreshold,
    InvalidSceneCapacity,
    NoSourceFrames,
}

impl fmt::Display for CdeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CdeError::InvalidThreshold => "delta_cde must lie in (0, 1]",
            CdeError::InvalidSceneCapacity => "max_objects_per_scene must be at least 1",
            CdeError::NoSourceFrames => "cross-domain examination needs source frames",
        };
        f.write_str(msg)
    }
}

impl core::error::Error for CdeError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdeConfig {
    pub delta_cde: f64,
    /// Confidence threshold applied to source-environment predictions.
    pub delta_pos: f64,
    pub max_objects_per_scene: usize,
    pub rng_seed: u64,
    /// Source frames an entry may collide in before it is given up on.
    pub max_source_attempts: usize,
    /// Whether entries that could not be placed anywhere keep their label.
    pub keep_unplaced: bool,
    pub iou: IouKind,
}

impl Default for CdeConfig {
    fn default() -> Self {
        CdeConfig {
            delta_cde: 0.6,
            delta_pos: 0.6,
            max_objects_per_scene: 20,
            rng_seed: 0,
            max_source_attempts: 10,
            keep_unplaced: true,
            iou: IouKind::ThreeD,
        }
    }
}

impl CdeConfig {
    pub fn validate(&self) -> Result<(), CdeError> {
        if !(self.delta_cde > 0.0 && self.delta_cde <= 1.0) {
            return Err(CdeError::InvalidThreshold);
        }
        if self.max_objects_per_scene == 0 {
            return Err(CdeError::InvalidSceneCapacity);
        }
        Ok(())
    }
}

/// Outcome of examining one pseudo box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdeVerdict {
    pub box_index: usize,
    pub class_id: u32,
    pub matched: bool,
    pub best_iou: f64,
    pub kept: bool,
    /// False when the box could not be placed in any source scene.
    pub examined: bool,
}

impl CdeVerdict {
    pub fn examined(box_index: usize, class_id: u32, best_iou: Option<f64>, delta_cde: f64) -> Self {
        let matched = best_iou.is_some();
        let best_iou = best_iou.unwrap_or(0.0);
        CdeVerdict {
            box_index,
            class_id,
            matched,
            best_iou,
            kept: matched && best_iou >= delta_cde,
            examined: true,
        }
    }

    pub fn unexamined(box_index: usize, class_id: u32, keep: bool) -> Self {
        CdeVerdict {
            box_index,
            class_id,
            matched: false,
            best_iou: 0.0,
            kept: keep,
            examined: false,
        }
    }

    /// `kept <=> matched && best_iou >= delta_cde` for examined boxes.
    pub fn is_sound(&self, delta_cde: f64) -> bool {
        !self.examined || self.kept == (self.matched && self.best_iou >= delta_cde)
    }
}

/// Finds the source-environment prediction corresponding to `pseudo`: the
/// confident same-class box of maximal IoU, ties to the higher score and then
/// the lower index. `(None, 0.0)` when nothing overlaps.
pub fn match_prediction(
    pseudo: &Box3D,
    source_env: &InferenceResult,
    delta_pos: f64,
    kind: IouKind,
) -> (Option<Box3D>, f64) {
    let mut best: Option<(f64, f64, Box3D)> = None;
    for b in &source_env.postnms {
        let score = b.score.unwrap_or(0.0);
        if b.class_id != pseudo.class_id || !(delta_pos <= 0.0 || score > delta_pos) {
            continue;
        }
        let overlap = iou(kind, pseudo, b);
        if overlap <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((bi, bs, _)) => overlap > bi || (overlap == bi && score > bs),
        };
        if better {
            best = Some((overlap, score, *b));
        }
    }
    match best {
        Some((overlap, _, b)) => (Some(b), overlap),
        None => (None, 0.0),
    }
}

/// A source scene with some pseudo-labeled objects pasted in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExaminationScene {
    pub cloud: PointCloud,
    /// `(entry index, box)` for every placed entry.
    pub placed: Vec<(usize, Box3D)>,
    /// Entries left for another source frame, in input order.
    pub deferred: Vec<usize>,
    /// The subset of `deferred` that collided with something in this scene.
    pub collided: Vec<usize>,
}

/// `R(X^s) (+) X^ps` for the entries listed in `pending`. An entry whose
/// footprint overlaps a source ground-truth box or an already placed entry is
/// deferred, as is everything past `capacity`.
pub fn build_examination_scene(
    source_cloud: &PointCloud,
    source_labels: &LabelSet,
    entries: &[ObjectBankEntry],
    pending: &[usize],
    capacity: usize,
) -> ExaminationScene {
    let mut occupied: Vec<Box3D> = source_labels.boxes.clone();
    let mut placed = Vec::new();
    let mut deferred = Vec::new();
    let mut collided = Vec::new();
    for &i in pending {
        let b = entries[i].bbox;
        if placed.len() >= capacity {
            deferred.push(i);
        } else if occupied.iter().any(|o| bev_intersection_area(o, &b) > 0.0) {
            deferred.push(i);
            collided.push(i);
        } else {
            occupied.push(b);
            placed.push((i, b));
        }
    }
    let footprints: Vec<Box3D> = placed.iter().map(|(_, b)| *b).collect();
    let pasted: Vec<ObjectBankEntry> = placed.iter().map(|(i, _)| entries[*i].clone()).collect();
    ExaminationScene {
        cloud: paste(&remove_points_in_boxes(source_cloud, &footprints), &pasted),
        placed,
        deferred,
        collided,
    }
}

/// Result of examining every pseudo box of one target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameExamination {
    pub kept: LabelSet,
    /// One verdict per pseudo box, in box order.
    pub verdicts: Vec<CdeVerdict>,
    /// Source scenes inferred.
    pub scenes: usize,
}

impl FrameExamination {
    pub fn unexamined_count(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.examined).count()
    }
}

/// Examines all pseudo boxes of one target frame.
///
/// `load_source(i)` yields source frame `i` of `source_count` (points and
/// ground truth); `infer(scene_id, cloud)` runs the detector. Source frames
/// are drawn uniformly from `rng`. Any error from the callbacks aborts the
/// frame.
pub fn examine_frame<R, E, L, I>(
    target_cloud: &PointCloud,
    pseudo: &LabelSet,
    source_count: usize,
    cfg: &CdeConfig,
    rng: &mut R,
    mut load_source: L,
    mut infer: I,
) -> Result<FrameExamination, E>
where
    R: Rng + ?Sized,
    E: From<CdeError>,
    L: FnMut(usize) -> Result<(PointCloud, LabelSet), E>,
    I: FnMut(&str, &PointCloud) -> Result<InferenceResult, E>,
{
    cfg.validate()?;
    let entries = bank_objects(target_cloud, pseudo, Provenance::TargetPseudo);
    let mut verdicts: Vec<Option<CdeVerdict>> = vec![None; entries.len()];
    let mut collisions = vec![0usize; entries.len()];
    let mut pending: Vec<usize> = (0..entries.len()).collect();
    if !pending.is_empty() && source_count == 0 {
        return Err(CdeError::NoSourceFrames.into());
    }
    let mut scenes = 0;
    while !pending.is_empty() {
        let source_index = rng.random_range(0..source_count);
        let (source_cloud, source_labels) = load_source(source_index)?;
        let scene = build_examination_scene(
            &source_cloud,
            &source_labels,
            &entries,
            &pending,
            cfg.max_objects_per_scene,
        );
        if !scene.placed.is_empty() {
            let scene_id = format!("cde-{scenes}-{}", pseudo.frame_id);
            let result = infer(&scene_id, &scene.cloud)?;
            scenes += 1;
            for &(i, b) in &scene.placed {
                let (best, overlap) = match_prediction(&b, &result, cfg.delta_pos, cfg.iou);
                let best_iou = best.map(|_| overlap);
                verdicts[i] = Some(CdeVerdict::examined(i, b.class_id, best_iou, cfg.delta_cde));
            }
        }
        for &i in &scene.collided {
            collisions[i] += 1;
        }
        pending = scene
            .deferred
            .into_iter()
            .filter(|&i| {
                if collisions[i] >= cfg.max_source_attempts {
                    verdicts[i] = Some(CdeVerdict::unexamined(
                        i,
                        entries[i].bbox.class_id,
                        cfg.keep_unplaced,
                    ));
                    false
                } else {
                    true
                }
            })
            .collect();
    }

    let verdicts: Vec<CdeVerdict> = verdicts.into_iter().map(|v| v.expect("every entry resolved")).collect();
    let boxes = verdicts
        .iter()
        .filter(|v| v.kept)
        .map(|v| pseudo.boxes[v.box_index])
        .collect();
    Ok(FrameExamination {
        kept: LabelSet::new(pseudo.frame_id.clone(), boxes),
        verdicts,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn car(cx: f64, cy: f64) -> Box3D {
        Box3D::new([cx, cy, 0.75], [1.8, 4.0, 1.5], 0.0, 1).unwrap()
    }

    fn scored(b: Box3D, s: f64) -> Box3D {
        b.with_score(s).unwrap()
    }

    fn object_cloud(boxes: &[Box3D]) -> PointCloud {
        let mut pts = Vec::new();
        for b in boxes {
            for i in 0..5 {
                let t = i as f64 * 0.1 - 0.2;
                let w = b.to_world([t, t * 2.0, t]);
                pts.push(Point::new(w[0], w[1], w[2], 0.0));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn exact_reproduction_matches_fully() {
        let p = car(0.0, 0.0);
        let r = InferenceResult {
            frame_id: "s".into(),
            postnms: vec![scored(p, 0.9)],
            prenms: vec![],
        };
        let (best, overlap) = match_prediction(&p, &r, 0.6, IouKind::ThreeD);
        assert_eq!(overlap, 1.0);
        assert_eq!(best, Some(scored(p, 0.9)));
    }

    #[test]
    fn class_mismatch_or_low_score_is_unmatched() {
        let p = car(0.0, 0.0);
        let mut other = scored(p, 0.9);
        other.class_id = 2;
        let r = InferenceResult {
            frame_id: "s".into(),
            postnms: vec![other, scored(p, 0.5)],
            prenms: vec![],
        };
        assert_eq!(match_prediction(&p, &r, 0.6, IouKind::ThreeD), (None, 0.0));
    }

    #[test]
    fn best_of_two_candidates_wins() {
        let p = Box3D::new([0.0, 0.0, 0.5], [1.0, 1.0, 1.0], 0.0, 1).unwrap();
        // unit cubes offset by t along x: IoU (1 - t) / (1 + t)
        let at = |iou: f64| {
            let t = (1.0 - iou) / (1.0 + iou);
            scored(Box3D { cx: t, ..p }, 0.8)
        };
        let r = InferenceResult {
            frame_id: "s".into(),
            postnms: vec![at(0.4), at(0.7)],
            prenms: vec![],
        };
        let (best, overlap) = match_prediction(&p, &r, 0.6, IouKind::ThreeD);
        assert!((overlap - 0.7).abs() < 1e-12);
        assert_eq!(best, Some(at(0.7)));
    }

    #[test]
    fn verdict_thresholds() {
        assert!(CdeVerdict::examined(0, 1, Some(0.8), 0.6).kept);
        assert!(!CdeVerdict::examined(0, 1, Some(0.59), 0.6).kept);
        assert!(CdeVerdict::examined(0, 1, Some(0.6), 0.6).kept);
        assert!(!CdeVerdict::examined(0, 1, None, 0.6).kept);
        let v = CdeVerdict::unexamined(3, 2, true);
        assert!(v.kept && !v.examined && v.is_sound(0.6));
    }

    #[test]
    fn scene_without_entries_is_source() {
        let src = object_cloud(&[car(10.0, 10.0)]);
        let labels = LabelSet::new("s", vec![car(10.0, 10.0)]);
        let scene = build_examination_scene(&src, &labels, &[], &[], 4);
        assert_eq!(scene.cloud, src);
        assert!(scene.placed.is_empty());
    }

    #[test]
    fn scene_clears_ground_and_pastes() {
        let target_box = car(0.0, 0.0);
        let target = object_cloud(&[target_box]);
        let entries = bank_objects(&target, &LabelSet::new("t", vec![target_box]), Provenance::TargetPseudo);
        let ground = PointCloud::new(vec![Point::new(0.0, 0.0, -0.1, 0.0), Point::new(30.0, 0.0, 0.0, 0.0)]);
        let scene = build_examination_scene(&ground, &LabelSet::new("s", vec![]), &entries, &[0], 4);
        assert_eq!(scene.placed, vec![(0, target_box)]);
        assert_eq!(scene.cloud.len(), 1 + 5);
        assert_eq!(scene.cloud.count_inside(&target_box), 5);
    }

    #[test]
    fn collision_with_source_gt_defers() {
        let target_box = car(0.0, 0.0);
        let entries = bank_objects(
            &object_cloud(&[target_box]),
            &LabelSet::new("t", vec![target_box]),
            Provenance::TargetPseudo,
        );
        let src_labels = LabelSet::new("s", vec![car(0.5, 1.0)]);
        let scene = build_examination_scene(&PointCloud::default(), &src_labels, &entries, &[0], 4);
        assert!(scene.placed.is_empty());
        assert_eq!(scene.deferred, vec![0]);
        assert_eq!(scene.collided, vec![0]);
    }

    #[derive(Debug, PartialEq)]
    enum TestError {
        Cde(CdeError),
    }

    impl From<CdeError> for TestError {
        fn from(e: CdeError) -> Self {
            TestError::Cde(e)
        }
    }

    #[test]
    fn examine_defers_to_another_source_frame() {
        let pseudo_boxes = [car(0.0, 0.0), car(20.0, 0.0)];
        let target = object_cloud(&pseudo_boxes);
        let pseudo = LabelSet::new("t", pseudo_boxes.iter().map(|b| scored(*b, 0.9)).collect());
        // frame 0 blocks the first box, frame 1 is empty
        let sources = [
            (PointCloud::default(), LabelSet::new("s0", vec![car(0.0, 0.5)])),
            (PointCloud::default(), LabelSet::new("s1", vec![])),
        ];
        let cfg = CdeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = Vec::new();
        let out = examine_frame(
            &target,
            &pseudo,
            sources.len(),
            &cfg,
            &mut rng,
            |i| Ok::<_, TestError>(sources[i].clone()),
            |id, cloud| {
                seen.push(alloc::string::String::from(id));
                // echo every pseudo box with points present
                let postnms = pseudo
                    .boxes
                    .iter()
                    .filter(|b| cloud.count_inside(b) > 0)
                    .copied()
                    .collect();
                Ok(InferenceResult { frame_id: id.into(), postnms, prenms: vec![] })
            },
        )
        .unwrap();
        assert_eq!(out.kept.boxes.len(), 2);
        assert!(out.verdicts.iter().all(|v| v.examined && v.kept && v.best_iou == 1.0));
        assert_eq!(out.scenes, seen.len());
    }

    #[test]
    fn unplaceable_entries_are_unexamined() {
        let b = car(0.0, 0.0);
        let pseudo = LabelSet::new("t", vec![scored(b, 0.9)]);
        let blocked = (PointCloud::default(), LabelSet::new("s", vec![b]));
        let mut cfg = CdeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut calls = 0;
        let out = examine_frame(
            &object_cloud(&[b]),
            &pseudo,
            1,
            &cfg,
            &mut rng,
            |_| {
                calls += 1;
                Ok::<_, TestError>(blocked.clone())
            },
            |_, _| unreachable!(),
        )
        .unwrap();
        assert_eq!(calls, cfg.max_source_attempts);
        assert_eq!(out.unexamined_count(), 1);
        assert_eq!(out.kept.boxes.len(), 1);

        cfg.keep_unplaced = false;
        let out = examine_frame(
            &object_cloud(&[b]),
            &pseudo,
            1,
            &cfg,
            &mut rng,
            |_| Ok::<_, TestError>(blocked.clone()),
            |_, _| unreachable!(),
        )
        .unwrap();
        assert!(out.kept.boxes.is_empty());
    }

    #[test]
    fn missing_sources_is_an_error() {
        let b = car(0.0, 0.0);
        let pseudo = LabelSet::new("t", vec![scored(b, 0.9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = examine_frame(
            &PointCloud::default(),
            &pseudo,
            0,
            &CdeConfig::default(),
            &mut rng,
            |_| -> Result<(PointCloud, LabelSet), TestError> { unreachable!() },
            |_, _| unreachable!(),
        );
        assert_eq!(err, Err(TestError::Cde(CdeError::NoSourceFrames)));
    }
}
