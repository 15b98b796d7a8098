//! The per-round stages, usable on their own: inference over the handle
//! pool, cross-domain examination, OBC scoring with downsampling, and
//! class-balanced injection. Each has a text report in the formats the
//! pipeline writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use redb_core::balance::{inject, sample_balanced, sample_balanced_excluding, ClassDraw, InjectionOutcome};
use redb_core::cde::{examine_frame, CdeConfig, CdeVerdict};
use redb_core::geom::nms;
use redb_core::obc::{count_obc, downsample, inverse_density_weights, kde_fit, ObcConfig};
use redb_core::{seed, Box3D, InferenceResult, LabelSet, ObjectBankEntry, ObjectPool, PointCloud, Provenance};

use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::io::{create_dir, read_frame, write_labels, write_manifest, write_points, FrameManifest, ManifestEntry};
use crate::proto::{filter_confident, DetectorHandle};

/// A frame held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub points_path: PathBuf,
    pub cloud: PointCloud,
    pub labels: Option<LabelSet>,
}

/// Loads every frame of a manifest in parallel, in manifest order.
pub fn load_frames(manifest: &FrameManifest) -> Vec<Result<Frame>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (cloud, labels) = read_frame(e)?;
            Ok(Frame {
                frame_id: e.frame_id.clone(),
                points_path: e.points.clone(),
                cloud,
                labels,
            })
        })
        .collect()
}

/// Source frames with labels; unreadable ones are logged and skipped.
pub fn load_source_frames(manifest: &FrameManifest, log: &EventLog) -> Result<Vec<Frame>> {
    manifest.require_labels().map_err(Error::Validation)?;
    let mut out = Vec::new();
    for (entry, frame) in manifest.entries.iter().zip(load_frames(manifest)) {
        match frame {
            Ok(f) => out.push(f),
            Err(e) => log.warn("source_frame_skipped", &[("frame", &entry.frame_id), ("error", &e)]),
        }
    }
    Ok(out)
}

/// Runs `task(handle, i)` for `i in 0..n`, each handle serving one item at a
/// time and picking up the next free item when done. Results are in item
/// order.
pub fn dispatch<T, F>(handles: &mut [DetectorHandle], n: usize, task: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut DetectorHandle, usize) -> T + Sync,
{
    assert!(!handles.is_empty(), "dispatch needs at least one handle");
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for h in handles.iter_mut() {
            let (next, slots, task) = (&next, &slots, &task);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = task(h, i);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every item dispatched"))
        .collect()
}

/// Without pre-NMS output the detector's boxes are treated as raw candidates:
/// they become `prenms` and the curator's own NMS decides `postnms`.
pub fn apply_nms_fallback(r: &mut InferenceResult, iou_thresh: f64) {
    let candidates = std::mem::take(&mut r.postnms);
    r.postnms = nms(&candidates, iou_thresh).kept.iter().map(|&i| candidates[i]).collect();
    r.prenms = candidates;
}

/// Infers every frame; failures are returned per frame.
pub fn infer_frames(handles: &mut [DetectorHandle], frames: &[Frame]) -> Vec<Result<InferenceResult>> {
    dispatch(handles, frames.len(), |h, i| {
        let f = &frames[i];
        h.infer(&f.frame_id, &f.cloud, Some(&f.points_path))
    })
}

/// Frames whose inference succeeded, with their results.
#[derive(Debug)]
pub struct Inferred<'a> {
    pub frames: Vec<&'a Frame>,
    pub results: Vec<InferenceResult>,
    pub failed: usize,
}

/// Infers every target frame of a round. Failed frames are logged and
/// dropped; the round aborts when more than half fail. With
/// `fallback_nms` set and a detector that reports no pre-NMS boxes,
/// [`apply_nms_fallback`] runs on every result.
pub fn infer_targets<'a>(
    handles: &mut [DetectorHandle],
    targets: &'a [Frame],
    fallback_nms: Option<f64>,
    round: u32,
    log: &EventLog,
) -> Result<Inferred<'a>> {
    let caps = handles[0].capabilities();
    let mut out = Inferred {
        frames: Vec::with_capacity(targets.len()),
        results: Vec::with_capacity(targets.len()),
        failed: 0,
    };
    for (f, r) in targets.iter().zip(infer_frames(handles, targets)) {
        match r {
            Ok(r) => {
                out.frames.push(f);
                out.results.push(r);
            }
            Err(e) => {
                out.failed += 1;
                log.warn("infer_failed", &[("round", &round), ("frame", &f.frame_id), ("error", &e)]);
            }
        }
    }
    log.info("infer", &[("round", &round), ("frames", &targets.len()), ("failed", &out.failed)]);
    if 2 * out.failed > targets.len() {
        return Err(Error::RoundAborted {
            round,
            reason: format!("inference failed on {} of {} frames", out.failed, targets.len()),
        });
    }
    if let (false, Some(iou)) = (caps.prenms, fallback_nms) {
        log.info("obc_fallback", &[("round", &round), ("nms_iou", &iou)]);
        for r in &mut out.results {
            apply_nms_fallback(r, iou);
        }
    }
    Ok(out)
}

pub fn confident_labels(results: &[InferenceResult], delta_pos: f64) -> Vec<LabelSet> {
    results.iter().map(|r| filter_confident(r, delta_pos)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdeOutcome {
    pub kept: Vec<LabelSet>,
    /// Per frame, one verdict per pseudo box.
    pub verdicts: Vec<Vec<CdeVerdict>>,
    /// Frames whose examination failed; their labels are kept unexamined.
    pub failed: Vec<String>,
    pub scenes: usize,
}

impl CdeOutcome {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn unexamined_count(&self) -> usize {
        self.verdicts.iter().flatten().filter(|v| !v.examined).count()
    }

    /// `frame_id box_index class_id best_iou kept examined` lines.
    pub fn verdict_text(&self) -> String {
        let mut out = String::new();
        for (labels, vs) in self.kept.iter().zip(&self.verdicts) {
            for v in vs {
                let _ = writeln!(
                    out,
                    "{} {} {} {:.6} {} {}",
                    labels.frame_id, v.box_index, v.class_id, v.best_iou, v.kept as u8, v.examined as u8
                );
            }
        }
        out
    }
}

/// Examines the pseudo labels of every target frame against randomly drawn
/// source scenes. Each frame draws from its own stream derived from
/// `(master_seed, frame_id, round)`. More than half the frames failing
/// aborts with [`Error::RoundAborted`].
pub fn run_cde(
    handles: &mut [DetectorHandle],
    targets: &[&Frame],
    pseudo: &[LabelSet],
    sources: &[Frame],
    cfg: &CdeConfig,
    master_seed: u64,
    round: u32,
    log: &EventLog,
) -> Result<CdeOutcome> {
    cfg.validate()?;
    let source_frames: Vec<(&PointCloud, &LabelSet)> = sources
        .iter()
        .filter_map(|f| f.labels.as_ref().map(|l| (&f.cloud, l)))
        .collect();
    let results = dispatch(handles, targets.len(), |h, i| {
        let t = targets[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed::frame_seed(master_seed, "cde", &t.frame_id, round as u64));
        examine_frame::<_, Error, _, _>(
            &t.cloud,
            &pseudo[i],
            source_frames.len(),
            cfg,
            &mut rng,
            |k| Ok((source_frames[k].0.clone(), source_frames[k].1.clone())),
            |scene_id, cloud| h.infer(scene_id, cloud, None),
        )
    });
    let mut out = CdeOutcome {
        kept: Vec::with_capacity(targets.len()),
        verdicts: Vec::with_capacity(targets.len()),
        failed: Vec::new(),
        scenes: 0,
    };
    for ((t, labels), r) in targets.iter().zip(pseudo).zip(results) {
        match r {
            Ok(exam) => {
                out.scenes += exam.scenes;
                out.kept.push(exam.kept);
                out.verdicts.push(exam.verdicts);
            }
            Err(e @ Error::Cde(_)) => return Err(e),
            Err(e) => {
                log.warn("cde_frame_failed", &[("round", &round), ("frame", &t.frame_id), ("error", &e)]);
                out.failed.push(t.frame_id.clone());
                out.kept.push(labels.clone());
                out.verdicts.push(
                    labels
                        .boxes
                        .iter()
                        .enumerate()
                        .map(|(i, b)| CdeVerdict::unexamined(i, b.class_id, true))
                        .collect(),
                );
            }
        }
    }
    if 2 * out.failed.len() > targets.len() {
        return Err(Error::RoundAborted {
            round,
            reason: format!("examination failed on {} of {} frames", out.failed.len(), targets.len()),
        });
    }
    Ok(out)
}

/// One pseudo box in the OBC report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObcRecord {
    pub frame: usize,
    pub box_index: usize,
    pub obc: u32,
    pub weight: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObcOutcome {
    /// Pool order: frame, then box.
    pub records: Vec<ObcRecord>,
    /// `None` for an empty pool.
    pub sigma: Option<f64>,
    /// Distinct OBC values with counts.
    pub histogram: Vec<(u32, u32)>,
    /// The diverse subset, in pool order.
    pub red: Vec<ObjectBankEntry>,
}

impl ObcOutcome {
    pub fn pool_size(&self) -> usize {
        self.records.len()
    }

    /// `frame_id box_index obc weight selected` lines, then the histogram.
    pub fn report_text(&self, frame_ids: &[&str]) -> String {
        let mut out = String::from("# frame_id box_index obc weight selected\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{} {} {} {:.9e} {}",
                frame_ids[r.frame], r.box_index, r.obc, r.weight, r.selected as u8
            );
        }
        out.push_str("# histogram: value count\n");
        for (v, c) in &self.histogram {
            let _ = writeln!(out, "{v} {c}");
        }
        out
    }
}

/// Scores every pseudo box by OBC against its frame's pre-NMS boxes, fits the
/// KDE and draws `ceil(n / d)` boxes by inverse density. With `uniform` every
/// box counts as OBC 1.
pub fn run_obc(
    targets: &[&Frame],
    pseudo: &[LabelSet],
    prenms: &[&[Box3D]],
    cfg: &ObcConfig,
    uniform: bool,
) -> Result<ObcOutcome> {
    cfg.validate()?;
    let obc_per_frame: Vec<Vec<u32>> = pseudo
        .par_iter()
        .zip(prenms.par_iter())
        .map(|(labels, pre)| {
            labels
                .boxes
                .iter()
                .map(|b| if uniform { 1 } else { count_obc(b, pre, cfg.delta_obc) })
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    for (f, values) in obc_per_frame.iter().enumerate() {
        for (i, &obc) in values.iter().enumerate() {
            records.push(ObcRecord {
                frame: f,
                box_index: i,
                obc,
                weight: 0.0,
                selected: false,
            });
        }
    }
    if records.is_empty() {
        return Ok(ObcOutcome {
            records,
            sigma: None,
            histogram: Vec::new(),
            red: Vec::new(),
        });
    }
    let samples: Vec<f64> = records.iter().map(|r| r.obc as f64).collect();
    let model = kde_fit(&samples, cfg.bandwidth)?;
    let weights = inverse_density_weights(&model, &samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let chosen = downsample(&samples, &model, cfg.d, &mut rng);
    for (r, w) in records.iter_mut().zip(&weights) {
        r.weight = *w;
    }
    let mut red = Vec::with_capacity(chosen.len());
    for &k in &chosen {
        let r = &mut records[k];
        r.selected = true;
        let t = targets[r.frame];
        let mut e = ObjectBankEntry::from_scene(
            &t.cloud,
            pseudo[r.frame].boxes[r.box_index],
            Provenance::TargetPseudo,
            t.frame_id.as_str(),
        );
        e.obc = Some(r.obc);
        red.push(e);
    }
    Ok(ObcOutcome {
        records,
        sigma: Some(model.sigma()),
        histogram: model.histogram().map(|(v, c)| (v as u32, c)).collect(),
        red,
    })
}

/// Source ground truth cropped into a pool.
pub fn build_gt_pool(sources: &[Frame]) -> ObjectPool {
    let entries: Vec<ObjectBankEntry> = sources
        .par_iter()
        .flat_map_iter(|f| {
            let labels = f.labels.clone().unwrap_or_else(|| LabelSet::new(f.frame_id.clone(), Vec::new()));
            redb_core::balance::bank_objects(&f.cloud, &labels, Provenance::SourceGt)
        })
        .collect();
    ObjectPool::from_entries(Provenance::SourceGt, entries).expect("uniform provenance")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionParams {
    pub s_r: u32,
    pub s_g: u32,
    pub num_classes: u32,
    pub master_seed: u64,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInjection {
    pub frame_id: String,
    pub outcome: InjectionOutcome,
    pub red_draws: Vec<ClassDraw>,
    pub gt_draws: Vec<ClassDraw>,
}

/// Draws ReD and GT objects per frame and class and injects them. Frames
/// never receive ReD objects cropped from themselves. Each frame uses a
/// stream derived from `(master_seed, frame_id, round)`, so the result does
/// not depend on scheduling.
pub fn inject_frames(
    targets: &[&Frame],
    pseudo: &[LabelSet],
    red: &ObjectPool,
    gt: &ObjectPool,
    ros_range: (f64, f64),
    p: &InjectionParams,
) -> Result<Vec<FrameInjection>> {
    targets
        .par_iter()
        .zip(pseudo.par_iter())
        .map(|(t, labels)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::frame_seed(p.master_seed, "inject", &t.frame_id, p.round as u64));
            let (red_s, red_draws) =
                sample_balanced_excluding(red, p.s_r as usize, p.num_classes, Some(t.frame_id.as_str()), &mut rng);
            let (gt_s, gt_draws) = sample_balanced(gt, p.s_g as usize, p.num_classes, &mut rng);
            let outcome = inject(&t.cloud, labels, &red_s, &gt_s, ros_range, &mut rng)?;
            Ok(FrameInjection {
                frame_id: t.frame_id.clone(),
                outcome,
                red_draws,
                gt_draws,
            })
        })
        .collect()
}

/// Writes `points/<id>.bin`, `labels/<id>.txt` and `manifest.tsv` under
/// `dir`, paths relative to `dir`.
pub fn write_injected(dir: &Path, injections: &[FrameInjection]) -> Result<FrameManifest> {
    create_dir(&dir.join("points"))?;
    create_dir(&dir.join("labels"))?;
    let entries = injections
        .par_iter()
        .map(|fi| {
            let points = PathBuf::from("points").join(format!("{}.bin", fi.frame_id));
            let labels = PathBuf::from("labels").join(format!("{}.txt", fi.frame_id));
            write_points(&fi.outcome.cloud, &dir.join(&points))?;
            write_labels(&fi.outcome.labels, &dir.join(&labels))?;
            Ok(ManifestEntry {
                frame_id: fi.frame_id.clone(),
                points,
                labels: Some(labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = FrameManifest { entries };
    write_manifest(&m, &dir.join("manifest.tsv"))?;
    Ok(m)
}

/// `red/<frame>.txt` with the selected boxes of each origin frame and
/// `red_manifest.tsv` pointing at the original target points.
pub fn write_red(dir: &Path, red: &[ObjectBankEntry], targets: &[&Frame]) -> Result<()> {
    let red_dir = dir.join("red");
    create_dir(&red_dir)?;
    let mut entries = Vec::new();
    for t in targets {
        let boxes: Vec<Box3D> = red.iter().filter(|e| e.origin_frame == t.frame_id).map(|e| e.bbox).collect();
        if boxes.is_empty() {
            continue;
        }
        let labels = PathBuf::from("red").join(format!("{}.txt", t.frame_id));
        write_labels(&LabelSet::new(t.frame_id.clone(), boxes), &dir.join(&labels))?;
        let points = std::path::absolute(&t.points_path).map_err(|e| Error::io(&t.points_path, e))?;
        entries.push(ManifestEntry {
            frame_id: t.frame_id.clone(),
            points,
            labels: Some(labels),
        });
    }
    write_manifest(&FrameManifest { entries }, &dir.join("red_manifest.tsv"))
}

/// Label sets written as `<dir>/<id>.txt`.
pub fn write_label_dir(dir: &Path, labels: &[LabelSet]) -> Result<()> {
    create_dir(dir)?;
    labels
        .par_iter()
        .try_for_each(|l| write_labels(l, &dir.join(format!("{}.txt", l.frame_id))))
}

/// Per-class injection totals over a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassInjection {
    pub class_id: u32,
    pub gt_pool: usize,
    pub red_pool: usize,
    pub s_g: u32,
    pub s_r: u32,
    pub gt_drawn: usize,
    pub gt_placed: usize,
    pub gt_rejected: usize,
    pub red_drawn: usize,
    pub red_placed: usize,
    pub red_rejected: usize,
}

pub fn summarize_injections(
    injections: &[FrameInjection],
    red: &ObjectPool,
    gt: &ObjectPool,
    p: &InjectionParams,
) -> Vec<ClassInjection> {
    let mut by_class: BTreeMap<u32, ClassInjection> = (1..=p.num_classes)
        .map(|c| {
            (
                c,
                ClassInjection {
                    class_id: c,
                    gt_pool: gt.class_len(c),
                    red_pool: red.class_len(c),
                    s_g: p.s_g,
                    s_r: p.s_r,
                    ..Default::default()
                },
            )
        })
        .collect();
    for fi in injections {
        for (d, slot) in fi.red_draws.iter().map(|d| (d, 0)).chain(fi.gt_draws.iter().map(|d| (d, 1))) {
            let c = by_class.get_mut(&d.class_id).expect("configured class");
            if slot == 0 {
                c.red_drawn += d.drawn;
                c.red_placed += fi.outcome.placed_count(d.class_id, Provenance::TargetPseudo);
                c.red_rejected += fi.outcome.rejected_count(d.class_id, Provenance::TargetPseudo);
            } else {
                c.gt_drawn += d.drawn;
                c.gt_placed += fi.outcome.placed_count(d.class_id, Provenance::SourceGt);
                c.gt_rejected += fi.outcome.rejected_count(d.class_id, Provenance::SourceGt);
            }
        }
    }
    by_class.into_values().collect()
}

/// One line per frame and class:
/// `frame_id class_id gt_available gt_requested gt_drawn gt_placed gt_rejected
/// red_available red_requested red_drawn red_placed red_rejected`.
pub fn injection_text(injections: &[FrameInjection]) -> String {
    let mut out = String::from(
        "# frame_id class_id gt_available gt_requested gt_drawn gt_placed gt_rejected \
         red_available red_requested red_drawn red_placed red_rejected\n",
    );
    for fi in injections {
        for (g, r) in fi.gt_draws.iter().zip(&fi.red_draws) {
            let c = g.class_id;
            let _ = writeln!(
                out,
                "{} {c} {} {} {} {} {} {} {} {} {} {}",
                fi.frame_id,
                g.available,
                g.requested,
                g.drawn,
                fi.outcome.placed_count(c, Provenance::SourceGt),
                fi.outcome.rejected_count(c, Provenance::SourceGt),
                r.available,
                r.requested,
                r.drawn,
                fi.outcome.placed_count(c, Provenance::TargetPseudo),
                fi.outcome.rejected_count(c, Provenance::TargetPseudo),
            );
        }
    }
    out
}

pub fn class_table(classes: &[ClassInjection]) -> String {
    let mut out = String::from(
        "class gt_pool red_pool s_g s_r gt_drawn gt_placed gt_rejected red_drawn red_placed red_rejected\n",
    );
    for c in classes {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {}",
            c.class_id,
            c.gt_pool,
            c.red_pool,
            c.s_g,
            c.s_r,
            c.gt_drawn,
            c.gt_placed,
            c.gt_rejected,
            c.red_drawn,
            c.red_placed,
            c.red_rejected
        );
    }
    out
}
