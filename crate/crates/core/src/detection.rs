//! What a detector hands back for one frame.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cloud::LabelSet;
use crate::geom::Box3D;

/// Post-NMS detections plus the raw pre-NMS candidates (empty when the
/// detector does not report them).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceResult {
    pub frame_id: String,
    pub postnms: Vec<Box3D>,
    pub prenms: Vec<Box3D>,
}

impl InferenceResult {
    pub fn empty(frame_id: impl Into<String>) -> Self {
        InferenceResult {
            frame_id: frame_id.into(),
            ..Default::default()
        }
    }
}

/// Keeps post-NMS boxes whose score exceeds `delta_pos`. A threshold of zero
/// disables filtering.
pub fn filter_confident(result: &InferenceResult, delta_pos: f64) -> LabelSet {
    let boxes = result
        .postnms
        .iter()
        .filter(|b| delta_pos <= 0.0 || b.score.unwrap_or(0.0) > delta_pos)
        .copied()
        .collect();
    LabelSet::new(result.frame_id.clone(), boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scored(s: f64) -> Box3D {
        Box3D::new([s * 10.0, 0.0, 0.0], [1.0; 3], 0.0, 1)
            .unwrap()
            .with_score(s)
            .unwrap()
    }

    #[test]
    fn thresholds() {
        let r = InferenceResult {
            frame_id: "t".into(),
            postnms: vec![scored(0.5), scored(0.61), scored(0.9)],
            prenms: vec![],
        };
        assert_eq!(filter_confident(&r, 0.0).boxes.len(), 3);
        assert!(filter_confident(&r, 1.0).boxes.is_empty());
        let kept = filter_confident(&r, 0.6);
        assert_eq!(kept.boxes, vec![scored(0.61), scored(0.9)]);
        assert_eq!(kept.frame_id, "t");
    }
}
