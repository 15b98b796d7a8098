//! The alternating label/train loop.
//!
//! Labels are generated at epoch 1 and at every epoch in `label_epochs`.
//! Each labeling round infers every target frame, keeps confident boxes,
//! examines them across domains (first round only), scores them by OBC,
//! downsamples the diverse subset, injects balanced ReD and source objects
//! into every frame and writes the augmented frames. One train call per
//! round then covers the epochs up to the next labeling round.
//!
//! ```text
//! <output_dir>/events.log
//! <output_dir>/round_<k>/{labels,points,pseudo}/...
//! <output_dir>/round_<k>/{manifest.tsv,report.txt,obc.txt,injections.txt,red_manifest.tsv}
//! <output_dir>/round_1/cde_verdicts.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use redb_core::balance::{bank_objects, RoundSchedule};
use redb_core::cloud::{paste, remove_points_in_boxes, ros_scale};
use redb_core::geom::bev_intersection_area;
use redb_core::{seed, Box3D, LabelSet, ObjectPool, Provenance};

use crate::config::{open_detector, ObcSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::io::{create_dir, read_manifest, write_labels, write_manifest, write_points, write_text, FrameManifest, ManifestEntry};
use crate::proto::DetectorHandle;
use crate::stages::{
    build_gt_pool, class_table, confident_labels, infer_targets, inject_frames, injection_text,
    load_frames, load_source_frames, run_cde, run_obc, summarize_injections, write_injected, write_label_dir,
    write_red, ClassInjection, Frame, Inferred, InjectionParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Trained,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round_index: u32,
    pub epoch: u32,
    /// Last epoch covered by this round's train call.
    pub last_epoch: u32,
    pub frames: usize,
    pub failed_frames: usize,
    pub raw_pseudo: usize,
    /// `None` outside the first round.
    pub cde_kept: Option<usize>,
    pub cde_unexamined: usize,
    pub obc_pool: usize,
    pub red_size: usize,
    pub sigma: Option<f64>,
    pub schedule: RoundSchedule,
    pub classes: Vec<ClassInjection>,
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub train: Option<TrainStatus>,
}

impl RoundReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ = writeln!(out, "round {}", self.round_index);
        let _ = writeln!(out, "epoch {}", self.epoch);
        let _ = writeln!(out, "epochs_trained {}-{}", self.epoch, self.last_epoch);
        let _ = writeln!(out, "frames {}", self.frames);
        let _ = writeln!(out, "failed_frames {}", self.failed_frames);
        let _ = writeln!(out, "raw_pseudo {}", self.raw_pseudo);
        let _ = writeln!(out, "cde_kept {}", opt(self.cde_kept.map(|v| v.to_string())));
        let _ = writeln!(out, "cde_unexamined {}", self.cde_unexamined);
        let _ = writeln!(out, "obc_pool {}", self.obc_pool);
        let _ = writeln!(out, "red_size {}", self.red_size);
        let _ = writeln!(out, "sigma {}", opt(self.sigma.map(|s| format!("{s:.9}"))));
        let _ = writeln!(out, "s_r {}", self.schedule.s_r);
        let _ = writeln!(out, "s_g {}", self.schedule.s_g);
        let _ = writeln!(out, "manifest manifest.tsv");
        out.push_str(&class_table(&self.classes));
        out
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    handles: Vec<DetectorHandle>,
    log: EventLog,
    pool: Option<rayon::ThreadPool>,
}

impl Pipeline {
    /// Opens `handle_pool_size` detector handles from the configured command.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let handles = (0..cfg.handle_pool_size)
            .map(|_| open_detector(&cfg.detector_command, cfg.timeout()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_handles(cfg, handles)
    }

    /// Uses already-open, identically configured handles.
    pub fn with_handles(cfg: PipelineConfig, handles: Vec<DetectorHandle>) -> Result<Self> {
        cfg.validate()?;
        if handles.is_empty() {
            return Err(Error::Config("at least one detector handle is required".into()));
        }
        create_dir(&cfg.output_dir)?;
        let log = EventLog::create(&cfg.output_dir.join("events.log"))?.mirror_to_stderr(true);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("jobs: {e}")))?;
        Ok(Pipeline {
            cfg,
            handles,
            log,
            pool: Some(pool),
        })
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn run(mut self) -> Result<Vec<RoundReport>> {
        let pool = self.pool.take().expect("run consumes the pipeline");
        let out = pool.install(|| self.run_inner());
        if let Err(e) = &out {
            self.log.error("aborted", &[("error", e)]);
        }
        for h in &mut self.handles {
            let _ = h.close();
        }
        out
    }

    fn run_inner(&mut self) -> Result<Vec<RoundReport>> {
        let cfg = self.cfg.clone();
        for (k, v) in cfg.pairs() {
            self.log.info("config", &[("key", &k), ("value", &v)]);
        }
        let caps = self.handles[0].capabilities();
        self.log.info(
            "detector",
            &[("handles", &self.handles.len()), ("prenms", &caps.prenms), ("train", &caps.train)],
        );

        let target_manifest = read_manifest(&cfg.target_manifest)?;
        if target_manifest.is_empty() {
            return Err(Error::Validation("target manifest is empty".into()));
        }
        let source_manifest = read_manifest(&cfg.source_manifest)?;
        if source_manifest.is_empty() {
            return Err(Error::Validation("source manifest is empty".into()));
        }
        let targets = load_frames(&target_manifest).into_iter().collect::<Result<Vec<Frame>>>()?;
        let sources = load_source_frames(&source_manifest, &self.log)?;
        if sources.is_empty() {
            return Err(Error::Validation("no readable source frame".into()));
        }
        self.log.info("data", &[("target_frames", &targets.len()), ("source_frames", &sources.len())]);

        if cfg.pretrain {
            self.pretrain(&sources)?;
        } else {
            self.log.info("pretrain", &[("mode", &"delegated")]);
        }

        let gt_pool = build_gt_pool(&sources);
        let per_class: Vec<String> = (1..=cfg.num_classes).map(|c| gt_pool.class_len(c).to_string()).collect();
        self.log.info("gt_pool", &[("size", &gt_pool.len()), ("per_class", &per_class.join(","))]);

        let epochs = cfg.round_epochs();
        let mut schedule = RoundSchedule::new(cfg.s_r, cfg.s_g, cfg.s_delta);
        let mut reports = Vec::with_capacity(epochs.len());
        for (i, &epoch) in epochs.iter().enumerate() {
            let round = i as u32 + 1;
            let last_epoch = epochs.get(i + 1).map_or(cfg.total_epochs, |e| e - 1);
            let mut report = self.generate_round(round, epoch, last_epoch, schedule, &targets, &sources, &gt_pool)?;
            report.train = Some(self.train(round, epoch, last_epoch, &report.manifest)?);
            reports.push(report);
            schedule = schedule.advance();
        }
        self.log.info("done", &[("rounds", &reports.len())]);
        Ok(reports)
    }

    fn train(&mut self, round: u32, epoch: u32, last_epoch: u32, manifest_path: &Path) -> Result<TrainStatus> {
        let manifest = read_manifest(manifest_path)?;
        let epochs = format!("{epoch}-{last_epoch}");
        let mut status = TrainStatus::Trained;
        for h in &mut self.handles {
            match h.train(manifest_path, &manifest) {
                Ok(()) => {}
                Err(Error::Unsupported(_)) => status = TrainStatus::Unsupported,
                Err(e) => return Err(e),
            }
        }
        match status {
            TrainStatus::Trained => self.log.info(
                "train",
                &[("round", &round), ("epochs", &epochs), ("status", &"ok"), ("manifest", &manifest_path.display())],
            ),
            TrainStatus::Unsupported => self.log.warn(
                "train",
                &[("round", &round), ("epochs", &epochs), ("status", &"unsupported")],
            ),
        }
        Ok(status)
    }

    /// Writes scaled source frames under `pretrain/` and trains once on them.
    fn pretrain(&mut self, sources: &[Frame]) -> Result<()> {
        let dir = self.cfg.output_dir.join("pretrain");
        let frames = ros_augment_sources(sources, self.cfg.ros_range, self.cfg.seed)?;
        create_dir(&dir.join("points"))?;
        create_dir(&dir.join("labels"))?;
        let entries = frames
            .par_iter()
            .map(|f| {
                let points = PathBuf::from("points").join(format!("{}.bin", f.frame_id));
                let labels = PathBuf::from("labels").join(format!("{}.txt", f.frame_id));
                write_points(&f.cloud, &dir.join(&points))?;
                write_labels(f.labels.as_ref().expect("source labels"), &dir.join(&labels))?;
                Ok(ManifestEntry {
                    frame_id: f.frame_id.clone(),
                    points,
                    labels: Some(labels),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest_path = dir.join("manifest.tsv");
        write_manifest(&FrameManifest { entries }, &manifest_path)?;
        let manifest = read_manifest(&manifest_path)?;
        let mut status = "ok";
        for h in &mut self.handles {
            match h.train(&manifest_path, &manifest) {
                Ok(()) => {}
                Err(Error::Unsupported(_)) => status = "unsupported",
                Err(e) => return Err(e),
            }
        }
        self.log.info("pretrain", &[("mode", &"trained"), ("status", &status), ("frames", &frames.len())]);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn generate_round(
        &mut self,
        round: u32,
        epoch: u32,
        last_epoch: u32,
        schedule: RoundSchedule,
        targets: &[Frame],
        sources: &[Frame],
        gt_pool: &ObjectPool,
    ) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let log = &self.log;
        let dir = cfg.output_dir.join(format!("round_{round}"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        create_dir(&dir)?;
        log.info(
            "round_start",
            &[("round", &round), ("epoch", &epoch), ("s_r", &schedule.s_r), ("s_g", &schedule.s_g)],
        );

        let fallback = (cfg.obc_source == ObcSource::Auto).then_some(cfg.fallback_nms_iou);
        let Inferred {
            frames: ok_frames,
            results,
            failed,
        } = infer_targets(&mut self.handles, targets, fallback, round, log)?;

        let raw = confident_labels(&results, cfg.delta_pos);
        let raw_count: usize = raw.iter().map(|l| l.boxes.len()).sum();
        log.info("pseudo", &[("round", &round), ("raw", &raw_count), ("delta_pos", &cfg.delta_pos)]);

        let (pseudo, cde_kept, cde_unexamined) = if round == 1 {
            log.info("cde_start", &[("round", &round), ("frames", &ok_frames.len())]);
            let cde_cfg = cfg.cde_config();
            let out = run_cde(&mut self.handles, &ok_frames, &raw, sources, &cde_cfg, cfg.seed, round, log)?;
            write_text(&dir.join("cde_verdicts.txt"), &out.verdict_text())?;
            log.info(
                "cde_done",
                &[
                    ("round", &round),
                    ("raw", &raw_count),
                    ("kept", &out.kept_count()),
                    ("unexamined", &out.unexamined_count()),
                    ("scenes", &out.scenes),
                    ("failed_frames", &out.failed.len()),
                ],
            );
            let (kept, unexamined) = (out.kept_count(), out.unexamined_count());
            (out.kept, Some(kept), unexamined)
        } else {
            (raw, None, 0)
        };
        write_label_dir(&dir.join("pseudo"), &pseudo)?;

        let uniform = cfg.obc_source == ObcSource::Uniform;
        if uniform {
            log.warn("obc_uniform", &[("round", &round)]);
        }
        let obc_cfg = cfg.obc_config(round);
        let prenms: Vec<&[Box3D]> = results.iter().map(|r| r.prenms.as_slice()).collect();
        let obc = run_obc(&ok_frames, &pseudo, &prenms, &obc_cfg, uniform)?;
        let frame_ids: Vec<&str> = ok_frames.iter().map(|f| f.frame_id.as_str()).collect();
        write_text(&dir.join("obc.txt"), &obc.report_text(&frame_ids))?;
        if obc.pool_size() == 0 {
            log.warn("obc_empty", &[("round", &round)]);
        }
        log.info(
            "obc",
            &[
                ("round", &round),
                ("pool", &obc.pool_size()),
                ("sigma", &obc.sigma.map_or("-".to_string(), |s| format!("{s:.6}"))),
                ("red", &obc.red.len()),
            ],
        );
        write_red(&dir, &obc.red, &ok_frames)?;
        let red_size = obc.red.len();
        let red_pool = ObjectPool::from_entries(Provenance::TargetPseudo, obc.red)?;

        let params = InjectionParams {
            s_r: schedule.s_r,
            s_g: schedule.s_g,
            num_classes: cfg.num_classes,
            master_seed: cfg.seed,
            round,
        };
        let injections = inject_frames(&ok_frames, &pseudo, &red_pool, gt_pool, cfg.ros_range, &params)?;
        write_injected(&dir, &injections)?;
        write_text(&dir.join("injections.txt"), &injection_text(&injections))?;
        let classes = summarize_injections(&injections, &red_pool, gt_pool, &params);
        let n = injections.len();
        for c in &classes {
            for (pool, requested, drawn) in [
                ("gt", c.s_g as usize * n, c.gt_drawn),
                ("red", c.s_r as usize * n, c.red_drawn),
            ] {
                if drawn < requested {
                    log.warn(
                        "shortfall",
                        &[
                            ("round", &round),
                            ("class", &c.class_id),
                            ("pool", &pool),
                            ("requested", &requested),
                            ("drawn", &drawn),
                        ],
                    );
                }
            }
        }
        let placed: usize = classes.iter().map(|c| c.gt_placed + c.red_placed).sum();
        let rejected: usize = classes.iter().map(|c| c.gt_rejected + c.red_rejected).sum();
        log.info("inject", &[("round", &round), ("placed", &placed), ("rejected", &rejected)]);

        let report = RoundReport {
            round_index: round,
            epoch,
            last_epoch,
            frames: targets.len(),
            failed_frames: failed,
            raw_pseudo: raw_count,
            cde_kept,
            cde_unexamined,
            obc_pool: obc.records.len(),
            red_size,
            sigma: obc.sigma,
            schedule,
            classes,
            manifest: dir.join("manifest.tsv"),
            dir: dir.clone(),
            train: None,
        };
        write_text(&dir.join("report.txt"), &report.to_text())?;
        log.info("round_done", &[("round", &round), ("epoch", &epoch)]);
        Ok(report)
    }
}

/// Source frames with every ground-truth object scaled about its center.
/// An object whose scaled footprint would touch another box stays as is.
pub fn ros_augment_sources(sources: &[Frame], ros_range: (f64, f64), master_seed: u64) -> Result<Vec<Frame>> {
    let (lo, hi) = ros_range;
    sources
        .par_iter()
        .map(|f| {
            let labels = f.labels.clone().unwrap_or_default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::frame_seed(master_seed, "pretrain", &f.frame_id, 0));
            let entries = bank_objects(&f.cloud, &labels, Provenance::SourceGt);
            let mut boxes = labels.boxes.clone();
            let mut scaled = Vec::with_capacity(entries.len());
            for (i, e) in entries.iter().enumerate() {
                let factor = if lo < hi { rng.random_range(lo..=hi) } else { lo };
                let s = ros_scale(e, factor)?;
                let clear = boxes
                    .iter()
                    .enumerate()
                    .all(|(j, b)| j == i || bev_intersection_area(b, &s.bbox) == 0.0);
                if clear {
                    boxes[i] = s.bbox;
                    scaled.push(s);
                } else {
                    scaled.push(e.clone());
                }
            }
            let mut footprints = labels.boxes.clone();
            footprints.extend(scaled.iter().map(|e| e.bbox));
            let cloud = paste(&remove_points_in_boxes(&f.cloud, &footprints), &scaled);
            Ok(Frame {
                frame_id: f.frame_id.clone(),
                points_path: f.points_path.clone(),
                cloud,
                labels: Some(LabelSet::new(f.frame_id.clone(), boxes)),
            })
        })
        .collect()
}

/// Runs the whole loop with handles opened from the configuration.
pub fn run(cfg: PipelineConfig) -> Result<Vec<RoundReport>> {
    Pipeline::new(cfg)?.run()
}
