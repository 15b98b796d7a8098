use std::path::{Path, PathBuf};

use redb::config::PipelineConfig;
use redb::events::{parse_events, Event};
use redb::io::{read_labels, read_manifest, FrameManifest};
use redb::pipeline::{Pipeline, RoundReport, TrainStatus};
use redb::proto::{Capabilities, Detector, DetectorHandle};
use redb::sim::{generate_domain, write_domain, MockDetector, NeverDetector, SimSpec};
use redb::{Error, Result};
use redb_core::{InferenceResult, PointCloud};

struct Data {
    dir: tempfile::TempDir,
    spec: SimSpec,
}

impl Data {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SimSpec::with_seed(seed);
        spec.source.frames = 12;
        spec.target.frames = 16;
        write_domain(&generate_domain(&spec.source).unwrap(), &dir.path().join("source")).unwrap();
        write_domain(&generate_domain(&spec.target).unwrap(), &dir.path().join("target")).unwrap();
        Data { dir, spec }
    }

    fn config(&self, out: &str) -> PipelineConfig {
        PipelineConfig {
            source_manifest: self.dir.path().join("source/manifest.tsv"),
            target_manifest: self.dir.path().join("target/manifest.tsv"),
            output_dir: self.dir.path().join(out),
            seed: 5,
            ..Default::default()
        }
    }

    fn mock(&self) -> DetectorHandle {
        DetectorHandle::new(MockDetector::new(self.spec.mock.clone()).unwrap())
    }
}

fn run(cfg: PipelineConfig, handles: Vec<DetectorHandle>) -> (Result<Vec<RoundReport>>, Vec<Event>) {
    let log = cfg.output_dir.join("events.log");
    let out = Pipeline::with_handles(cfg, handles).and_then(Pipeline::run);
    (out, parse_events(&std::fs::read_to_string(log).unwrap()))
}

fn named<'a>(events: &'a [Event], name: &str) -> Vec<&'a Event> {
    events.iter().filter(|e| e.name == name).collect()
}

#[test]
fn no_label_epochs_means_one_round() {
    let data = Data::new(1);
    let cfg = PipelineConfig {
        label_epochs: vec![],
        ..data.config("out")
    };
    let (out, events) = run(cfg.clone(), vec![data.mock()]);
    let reports = out.unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!((reports[0].epoch, reports[0].last_epoch), (1, 120));
    assert_eq!(reports[0].train, Some(TrainStatus::Trained));
    let trains = named(&events, "train");
    assert_eq!(trains.len(), 1);
    assert_eq!(trains[0].get("epochs"), Some("1-120"));
    assert!(!cfg.output_dir.join("round_2").exists());
    assert!(named(&events, "config").iter().any(|e| e.get("key") == Some("label_epochs")));
}

#[test]
fn without_pseudo_labels_only_source_objects_are_injected() {
    let data = Data::new(2);
    let cfg = PipelineConfig {
        label_epochs: vec![61],
        ..data.config("out")
    };
    let (out, events) = run(cfg.clone(), vec![DetectorHandle::new(NeverDetector)]);
    let reports = out.unwrap();
    for r in &reports {
        assert_eq!((r.raw_pseudo, r.red_size), (0, 0));
        assert!(r.classes.iter().all(|c| c.red_drawn == 0 && c.gt_drawn > 0));
        let manifest = read_manifest(&r.manifest).unwrap();
        for e in &manifest.entries {
            let labels = read_labels(e.labels.as_ref().unwrap(), &e.frame_id).unwrap();
            let placed: usize = r.classes.iter().map(|c| c.gt_placed).sum::<usize>();
            assert!(labels.boxes.len() <= placed);
        }
    }
    assert_eq!(named(&events, "obc_empty").len(), 2);
}

#[test]
fn perfect_confidence_threshold_empties_the_red_pool() {
    let data = Data::new(3);
    let mut spec = data.spec.mock.clone();
    spec.fp_score = (0.45, 0.95);
    let cfg = PipelineConfig {
        delta_pos: 1.0,
        label_epochs: vec![],
        ..data.config("out")
    };
    let handle = DetectorHandle::new(MockDetector::new(spec).unwrap());
    let (out, _) = run(cfg, vec![handle]);
    let r = &out.unwrap()[0];
    // mock scores stay below 1
    assert_eq!((r.raw_pseudo, r.red_size), (0, 0));
    assert!(r.classes.iter().all(|c| c.red_placed == 0));
    assert!(r.classes.iter().map(|c| c.gt_placed).sum::<usize>() > 0);
}

/// Wraps a mock and drops optional capabilities.
struct Limited {
    inner: MockDetector,
    caps: Capabilities,
    fail_targets: bool,
}

impl Detector for Limited {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn infer(&mut self, frame_id: &str, cloud: &PointCloud, path: Option<&Path>) -> Result<InferenceResult> {
        if self.fail_targets && frame_id.starts_with("tgt") {
            return Err(Error::Detector("out of memory".into()));
        }
        self.inner.infer(frame_id, cloud, path)
    }

    fn train(&mut self, manifest_path: &Path, manifest: &FrameManifest) -> Result<()> {
        self.inner.train(manifest_path, manifest)
    }
}

fn limited(data: &Data, prenms: bool, train: bool, fail_targets: bool) -> DetectorHandle {
    DetectorHandle::new(Limited {
        inner: MockDetector::new(data.spec.mock.clone()).unwrap(),
        caps: Capabilities { prenms, train },
        fail_targets,
    })
}

#[test]
fn untrainable_detector_still_produces_every_round() {
    let data = Data::new(4);
    let (out, events) = run(data.config("out"), vec![limited(&data, true, false, false)]);
    let reports = out.unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.train == Some(TrainStatus::Unsupported)));
    let trains = named(&events, "train");
    assert_eq!(trains.len(), 4);
    assert!(trains.iter().all(|e| e.get("status") == Some("unsupported")));
}

#[test]
fn missing_prenms_falls_back_to_curator_nms() {
    let data = Data::new(5);
    let cfg = PipelineConfig {
        label_epochs: vec![],
        ..data.config("out")
    };
    let (out, events) = run(cfg.clone(), vec![limited(&data, false, true, false)]);
    let r = &out.unwrap()[0];
    assert_eq!(named(&events, "obc_fallback").len(), 1);
    assert!(r.obc_pool > 0);
    let obc = std::fs::read_to_string(cfg.output_dir.join("round_1/obc.txt")).unwrap();
    assert!(obc.contains("# histogram"));
}

#[test]
fn widespread_inference_failure_aborts_the_round() {
    let data = Data::new(6);
    let (out, events) = run(data.config("out"), vec![limited(&data, true, true, true)]);
    assert!(matches!(out, Err(Error::RoundAborted { round: 1, .. })), "{out:?}");
    assert_eq!(named(&events, "infer_failed").len(), 16);
    assert_eq!(named(&events, "aborted").len(), 1);
}

#[test]
fn pretraining_emits_a_scaled_source_set() {
    let data = Data::new(7);
    let cfg = PipelineConfig {
        pretrain: true,
        label_epochs: vec![],
        ..data.config("out")
    };
    let (out, events) = run(cfg.clone(), vec![data.mock()]);
    out.unwrap();
    let manifest = read_manifest(&cfg.output_dir.join("pretrain/manifest.tsv")).unwrap();
    assert_eq!(manifest.len(), 12);
    let pre = named(&events, "pretrain");
    assert!(pre.iter().any(|e| e.get("status") == Some("ok")), "{pre:?}");
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("events.log") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn outputs_do_not_depend_on_handles_or_threads() {
    let data = Data::new(8);
    let (a, _) = run(data.config("a"), vec![data.mock()]);
    let cfg = PipelineConfig {
        jobs: 3,
        handle_pool_size: 2,
        ..data.config("b")
    };
    let (b, _) = run(cfg, vec![data.mock(), data.mock()]);
    a.unwrap();
    b.unwrap();
    let (fa, fb) = (files(&data.dir.path().join("a")), files(&data.dir.path().join("b")));
    assert!(!fa.is_empty());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs", x.0.display());
    }

    let (c, _) = run(PipelineConfig { seed: 6, ..data.config("c") }, vec![data.mock()]);
    c.unwrap();
    assert_ne!(files(&data.dir.path().join("c")), fa);
}
