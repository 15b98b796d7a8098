use std::collections::{BTreeMap, BTreeSet};

use redb_core::geom::iou_3d;
use redb_core::LabelSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassMetrics {
    /// 0 for the all-class total.
    pub class_id: u32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassMetrics {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        let n = self.tp + self.fp;
        if n == 0 {
            1.0
        } else {
            self.tp as f64 / n as f64
        }
    }

    /// 1 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        let n = self.tp + self.fn_;
        if n == 0 {
            1.0
        } else {
            self.tp as f64 / n as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: &ClassMetrics) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    /// Ascending by class id.
    pub classes: Vec<ClassMetrics>,
}

impl Evaluation {
    /// Counts pooled over classes.
    pub fn total(&self) -> ClassMetrics {
        let mut t = ClassMetrics::default();
        for c in &self.classes {
            t.add(c);
        }
        t
    }

    pub fn class(&self, class_id: u32) -> ClassMetrics {
        self.classes
            .iter()
            .find(|c| c.class_id == class_id)
            .copied()
            .unwrap_or(ClassMetrics { class_id, ..Default::default() })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("class tp fp fn precision recall f1\n");
        let row = |name: String, m: &ClassMetrics| {
            format!(
                "{name} {} {} {} {:.6} {:.6} {:.6}\n",
                m.tp,
                m.fp,
                m.fn_,
                m.precision(),
                m.recall(),
                m.f1()
            )
        };
        for c in &self.classes {
            out.push_str(&row(c.class_id.to_string(), c));
        }
        out.push_str(&row("all".into(), &self.total()));
        out
    }
}

/// Greedy one-to-one matching per frame and class: predictions in
/// descending score order each take the unmatched ground-truth box of the
/// same class with the highest 3D IoU, if it reaches `iou_thresh`.
pub fn evaluate(pseudo: &[LabelSet], truth: &[LabelSet], iou_thresh: f64) -> Result<Evaluation> {
    let truth_by_id: BTreeMap<&str, &LabelSet> = truth.iter().map(|l| (l.frame_id.as_str(), l)).collect();
    let pseudo_ids: BTreeSet<&str> = pseudo.iter().map(|l| l.frame_id.as_str()).collect();
    if pseudo_ids.len() != pseudo.len() || truth_by_id.len() != truth.len() {
        return Err(Error::Validation("duplicate frame id in evaluation input".into()));
    }
    if let Some(id) = truth_by_id.keys().find(|id| !pseudo_ids.contains(*id)) {
        return Err(Error::Validation(format!("frame {id:?} has ground truth but no predictions")));
    }
    let mut per_class: BTreeMap<u32, ClassMetrics> = BTreeMap::new();
    for p in pseudo {
        let Some(t) = truth_by_id.get(p.frame_id.as_str()) else {
            return Err(Error::Validation(format!("frame {:?} has no ground truth", p.frame_id)));
        };
        let mut order: Vec<usize> = (0..p.boxes.len()).collect();
        order.sort_by(|&a, &b| {
            let sa = p.boxes[a].score.unwrap_or(0.0);
            let sb = p.boxes[b].score.unwrap_or(0.0);
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let mut taken = vec![false; t.boxes.len()];
        for i in order {
            let pb = &p.boxes[i];
            let m = per_class.entry(pb.class_id).or_insert(ClassMetrics {
                class_id: pb.class_id,
                ..Default::default()
            });
            let best = t
                .boxes
                .iter()
                .enumerate()
                .filter(|(j, g)| !taken[*j] && g.class_id == pb.class_id)
                .map(|(j, g)| (j, iou_3d(pb, g)))
                .filter(|&(_, v)| v >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    m.tp += 1;
                }
                None => m.fp += 1,
            }
        }
        for (j, g) in t.boxes.iter().enumerate() {
            if !taken[j] {
                per_class
                    .entry(g.class_id)
                    .or_insert(ClassMetrics {
                        class_id: g.class_id,
                        ..Default::default()
                    })
                    .fn_ += 1;
            }
        }
    }
    Ok(Evaluation {
        classes: per_class.into_values().collect(),
    })
}
