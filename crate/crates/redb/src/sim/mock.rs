use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use redb_core::geom::nms;
use redb_core::{seed, Box3D, InferenceResult, PointCloud};

use crate::error::{Error, Result};
use crate::io::FrameManifest;
use crate::proto::{Capabilities, Detector};

/// Detection quality in one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Std of the box center offset (m).
    pub center: f64,
    /// Std of the log size factor.
    pub size: f64,
    /// Std of the heading error (rad).
    pub yaw: f64,
    pub miss: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
}

impl NoiseSpec {
    pub const CLEAN: NoiseSpec = NoiseSpec {
        center: 0.0,
        size: 0.0,
        yaw: 0.0,
        miss: 0.0,
        fp_rate: 0.0,
    };

    fn validate(&self, which: &str) -> std::result::Result<(), String> {
        let stds = [self.center, self.size, self.yaw, self.fp_rate];
        if stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(format!("{which}: noise stds and fp rate must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.miss) {
            return Err(format!("{which}: miss probability must lie in [0, 1]"));
        }
        Ok(())
    }

    fn shrunk(&self, factor: f64) -> NoiseSpec {
        NoiseSpec {
            center: self.center * factor,
            size: self.size * factor,
            yaw: self.yaw * factor,
            miss: self.miss * factor,
            fp_rate: self.fp_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockDetectorSpec {
    pub seed: u64,
    /// Frames whose id starts with this are in the target environment; all
    /// others, examination scenes included, are in the source environment.
    pub target_prefix: String,
    pub source: NoiseSpec,
    pub target: NoiseSpec,
    /// Pre-NMS duplicates per detection are Poisson with mean
    /// `dup_base + dup_per_m2 * area + dup_per_10m * range / 10`.
    pub dup_base: f64,
    pub dup_per_m2: f64,
    pub dup_per_10m: f64,
    /// Duplicate center jitter as a fraction of the box dimensions.
    pub dup_jitter: f64,
    pub nms_iou: f64,
    pub cell: f64,
    pub min_cluster_points: usize,
    /// Score range of false positives.
    pub fp_score: (f64, f64),
    /// Target noise, miss probability and false-positive rate are multiplied
    /// by this after every train call.
    pub shrink: f64,
    /// Mean `(w, l, h)` per class; detections take the nearest.
    pub class_priors: Vec<[f64; 3]>,
    pub report_prenms: bool,
    pub trainable: bool,
}

impl Default for MockDetectorSpec {
    fn default() -> Self {
        MockDetectorSpec {
            seed: 7,
            target_prefix: "tgt".into(),
            source: NoiseSpec {
                center: 0.03,
                size: 0.02,
                yaw: 0.02,
                miss: 0.02,
                fp_rate: 0.0,
            },
            target: NoiseSpec {
                center: 0.3,
                size: 0.1,
                yaw: 0.12,
                miss: 0.15,
                fp_rate: 4.0,
            },
            dup_base: 1.0,
            dup_per_m2: 1.0,
            dup_per_10m: 0.5,
            dup_jitter: 0.08,
            nms_iou: 0.1,
            cell: 0.5,
            min_cluster_points: 5,
            fp_score: (0.45, 0.95),
            shrink: 0.7,
            class_priors: vec![[1.8, 4.2, 1.55], [0.6, 0.9, 1.75], [0.6, 1.8, 1.7]],
            report_prenms: true,
            trainable: true,
        }
    }
}

impl MockDetectorSpec {
    /// Plain cluster fits everywhere: no noise, misses or false positives.
    pub fn clean() -> Self {
        MockDetectorSpec {
            source: NoiseSpec::CLEAN,
            target: NoiseSpec::CLEAN,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.source.validate("source")?;
        self.target.validate("target")?;
        let rates = [self.dup_base, self.dup_per_m2, self.dup_per_10m, self.dup_jitter];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err("duplication parameters must be non-negative".into());
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err("shrink must lie in (0, 1]".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err("nms_iou must lie in (0, 1)".into());
        }
        if !(self.cell > 0.0 && self.cell.is_finite()) || self.min_cluster_points == 0 {
            return Err("cell must be positive and min_cluster_points at least 1".into());
        }
        let (lo, hi) = self.fp_score;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err("fp_score must satisfy 0 <= lo <= hi <= 1".into());
        }
        if self.class_priors.is_empty() || self.class_priors.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err("class priors must be positive".into());
        }
        Ok(())
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            prenms: self.report_prenms,
            train: self.trainable,
        }
    }
}

/// Cluster-based detector standing in for a trained network.
///
/// Points are hashed into square cells and flood-filled (8-neighbour) into
/// clusters; each cluster with enough points gets an oriented box from its
/// centroid, PCA heading and extent, perturbed by the environment's noise.
/// False positives are placed on stray points. Every random draw comes from
/// a stream derived from `(seed, frame_id, cluster)`, so results are
/// deterministic and coupled across train calls.
#[derive(Debug, Clone)]
pub struct MockDetector {
    spec: MockDetectorSpec,
    trained: u32,
}

impl MockDetector {
    pub fn new(spec: MockDetectorSpec) -> Result<Self> {
        spec.validate().map_err(Error::Validation)?;
        Ok(MockDetector { spec, trained: 0 })
    }

    pub fn spec(&self) -> &MockDetectorSpec {
        &self.spec
    }

    pub fn trained_rounds(&self) -> u32 {
        self.trained
    }

    pub fn set_trained_rounds(&mut self, rounds: u32) {
        self.trained = rounds;
    }

    /// Noise in effect for `frame_id`.
    pub fn noise_for(&self, frame_id: &str) -> NoiseSpec {
        if frame_id.starts_with(&self.spec.target_prefix) {
            self.spec.target.shrunk(self.spec.shrink.powi(self.trained as i32))
        } else {
            self.spec.source
        }
    }

    fn is_target(&self, frame_id: &str) -> bool {
        frame_id.starts_with(&self.spec.target_prefix)
    }

    pub fn detect(&self, frame_id: &str, cloud: &PointCloud) -> InferenceResult {
        let spec = &self.spec;
        let noise = self.noise_for(frame_id);
        let clusters = cluster_points(cloud, spec.cell);
        let mut prenms = Vec::new();
        let mut stray = Vec::new();

        for (k, members) in clusters.iter().enumerate() {
            if members.len() < spec.min_cluster_points {
                stray.extend_from_slice(members);
                continue;
            }
            let mut rng = stream(spec.seed, b"obj", frame_id, k as u64);
            let u_miss: f64 = rng.random();
            let eps: [f64; 7] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let score_noise: f64 = rng.sample(StandardNormal);
            if u_miss < noise.miss {
                continue;
            }
            let Some(fit) = fit_box(cloud, members) else {
                continue;
            };
            let class_id = nearest_class(&spec.class_priors, [fit.w, fit.l, fit.h]);
            let n = members.len() as f64;
            let score = (0.35 + 0.6 * (1.0 - (-n / 12.0).exp()) + 0.04 * score_noise).clamp(0.01, 0.99);
            let b = Box3D {
                cx: fit.cx + noise.center * eps[0],
                cy: fit.cy + noise.center * eps[1],
                cz: fit.cz + 0.5 * noise.center * eps[2],
                w: fit.w * (noise.size * eps[3]).exp(),
                l: fit.l * (noise.size * eps[4]).exp(),
                h: fit.h * (noise.size * eps[5]).exp(),
                yaw: redb_core::geom::normalize_yaw(fit.yaw + noise.yaw * eps[6]),
                class_id,
                score: Some(score),
            };
            let lambda = spec.dup_base + spec.dup_per_m2 * b.footprint_area() + spec.dup_per_10m * b.range() / 10.0;
            push_with_duplicates(&mut prenms, b, lambda, spec.dup_jitter, &mut rng);
        }

        let fp_rate = noise.fp_rate;
        if fp_rate > 0.0 && !stray.is_empty() {
            let mut rng = stream(spec.seed, b"fp", frame_id, 0);
            let keep = if self.is_target(frame_id) {
                spec.shrink.powi(self.trained as i32)
            } else {
                1.0
            };
            let count = Poisson::new(fp_rate).expect("positive rate").sample(&mut rng) as usize;
            for _ in 0..count {
                let u_keep: f64 = rng.random();
                let anchor = cloud.points[stray[rng.random_range(0..stray.len())]];
                let class = rng.random_range(0..spec.class_priors.len());
                let prior = spec.class_priors[class];
                let dims: [f64; 3] = std::array::from_fn(|i| prior[i] * (0.1 * rng.sample::<f64, _>(StandardNormal)).exp());
                let yaw = rng.random_range(-PI..PI);
                let score = rng.random_range(spec.fp_score.0..=spec.fp_score.1);
                if u_keep >= keep {
                    continue;
                }
                let b = Box3D {
                    cx: anchor.x,
                    cy: anchor.y,
                    cz: 0.5 * dims[2],
                    w: dims[0],
                    l: dims[1],
                    h: dims[2],
                    yaw,
                    class_id: class as u32 + 1,
                    score: Some(score),
                };
                push_with_duplicates(&mut prenms, b, spec.dup_base, spec.dup_jitter, &mut rng);
            }
        }

        let kept = nms(&prenms, spec.nms_iou).kept;
        InferenceResult {
            frame_id: frame_id.to_string(),
            postnms: kept.iter().map(|&i| prenms[i]).collect(),
            prenms: if spec.report_prenms { prenms } else { Vec::new() },
        }
    }
}

impl Detector for MockDetector {
    fn capabilities(&self) -> Capabilities {
        self.spec.capabilities()
    }

    fn infer(&mut self, frame_id: &str, cloud: &PointCloud, _path: Option<&Path>) -> Result<InferenceResult> {
        Ok(self.detect(frame_id, cloud))
    }

    fn train(&mut self, _manifest_path: &Path, manifest: &FrameManifest) -> Result<()> {
        if !self.spec.trainable {
            return Err(Error::Unsupported("train"));
        }
        if manifest.is_empty() {
            return Err(Error::Validation("train manifest is empty".into()));
        }
        self.trained += 1;
        Ok(())
    }
}

fn stream(master: u64, kind: &[u8], frame_id: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(master, &[kind, frame_id.as_bytes(), &index.to_le_bytes()]))
}

fn push_with_duplicates(out: &mut Vec<Box3D>, b: Box3D, lambda: f64, jitter: f64, rng: &mut ChaCha8Rng) {
    out.push(b);
    if lambda <= 0.0 {
        return;
    }
    let count = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
    let base_score = b.score.unwrap_or(1.0);
    for _ in 0..count {
        let e: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let factor: f64 = rng.random_range(0.5..0.98);
        out.push(Box3D {
            cx: b.cx + jitter * b.w * e[0],
            cy: b.cy + jitter * b.l * e[1],
            w: b.w * (0.05 * e[2]).exp(),
            l: b.l * (0.05 * e[3]).exp(),
            h: b.h * (0.05 * e[4]).exp(),
            yaw: redb_core::geom::normalize_yaw(b.yaw + 0.05 * e[5]),
            score: Some(base_score * factor),
            ..b
        });
    }
}

fn nearest_class(priors: &[[f64; 3]], dims: [f64; 3]) -> u32 {
    let cost = |p: &[f64; 3]| -> f64 { (0..3).map(|i| (dims[i] / p[i]).ln().powi(2)).sum() };
    let best = priors
        .iter()
        .enumerate()
        .min_by(|a, b| cost(a.1).total_cmp(&cost(b.1)))
        .map_or(0, |(i, _)| i);
    best as u32 + 1
}

/// Point indices grouped by 8-connected occupied cells. Clusters are
/// ordered by their smallest cell, members by index.
pub fn cluster_points(cloud: &PointCloud, cell: f64) -> Vec<Vec<usize>> {
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.iter().enumerate() {
        let key = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut label: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut clusters = Vec::new();
    for &start in cells.keys() {
        if label.contains_key(&start) {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        label.insert(start, id);
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&c]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if cells.contains_key(&n) && !label.contains_key(&n) {
                        label.insert(n, id);
                        queue.push_back(n);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// Oriented box around a cluster: the long axis follows the principal
/// component and becomes `l`. Extents are widened by `(n + 1) / (n - 1)`,
/// the bias correction for the range of uniform samples.
pub fn fit_box(cloud: &PointCloud, members: &[usize]) -> Option<Box3D> {
    let n = members.len();
    if n < 2 {
        return None;
    }
    let pts: Vec<[f64; 3]> = members.iter().map(|&i| cloud.points[i].xyz()).collect();
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // PCA heading, refined to the tightest bounding rectangle nearby
    let pca = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let area = |phi: f64| {
        let (s, c) = phi.sin_cos();
        let (mut a0, mut a1, mut b0, mut b1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &pts {
            let (dx, dy) = (p[0] - mx, p[1] - my);
            let (a, b) = (dx * c + dy * s, -dx * s + dy * c);
            (a0, a1, b0, b1) = (a0.min(a), a1.max(a), b0.min(b), b1.max(b));
        }
        (a1 - a0) * (b1 - b0)
    };
    let phi = (-30..=30)
        .map(|k| pca + k as f64 * 0.005)
        .min_by(|&x, &y| area(x).total_cmp(&area(y)))
        .expect("non-empty search");
    let (s, c) = phi.sin_cos();
    let range = |f: &dyn Fn(&[f64; 3]) -> f64| {
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let v = f(p);
            (lo.min(v), hi.max(v))
        })
    };
    let (a0, a1) = range(&|p| (p[0] - mx) * c + (p[1] - my) * s);
    let (b0, b1) = range(&|p| -(p[0] - mx) * s + (p[1] - my) * c);
    let (z0, z1) = range(&|p| p[2]);
    let k = (n as f64 + 1.0) / (n as f64 - 1.0);
    let (am, bm) = (0.5 * (a0 + a1), 0.5 * (b0 + b1));
    let floor = 0.05;
    Some(Box3D {
        cx: mx + am * c - bm * s,
        cy: my + am * s + bm * c,
        cz: 0.5 * (z0 + z1),
        w: ((b1 - b0) * k).max(floor),
        l: ((a1 - a0) * k).max(floor),
        h: ((z1 - z0) * k).max(floor),
        // local +y is the long axis
        yaw: redb_core::geom::normalize_yaw(phi - 0.5 * PI),
        class_id: 1,
        score: None,
    })
}

/// Re-detects every box of a fixed set that holds at least `min_points`
/// points, exactly and with score 1.
#[derive(Debug, Clone)]
pub struct EchoDetector {
    pub boxes: Vec<Box3D>,
    pub min_points: usize,
}

impl EchoDetector {
    pub fn new(boxes: Vec<Box3D>) -> Self {
        EchoDetector { boxes, min_points: 1 }
    }
}

impl Detector for EchoDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            prenms: true,
            train: true,
        }
    }

    fn infer(&mut self, frame_id: &str, cloud: &PointCloud, _path: Option<&Path>) -> Result<InferenceResult> {
        let found: Vec<Box3D> = self
            .boxes
            .iter()
            .filter(|b| cloud.count_inside(b) >= self.min_points)
            .map(|b| Box3D { score: Some(1.0), ..*b })
            .collect();
        Ok(InferenceResult {
            frame_id: frame_id.to_string(),
            prenms: found.clone(),
            postnms: found,
        })
    }

    fn train(&mut self, _: &Path, _: &FrameManifest) -> Result<()> {
        Ok(())
    }
}

/// Finds nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeverDetector;

impl Detector for NeverDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            prenms: true,
            train: true,
        }
    }

    fn infer(&mut self, frame_id: &str, _: &PointCloud, _: Option<&Path>) -> Result<InferenceResult> {
        Ok(InferenceResult::empty(frame_id))
    }

    fn train(&mut self, _: &Path, _: &FrameManifest) -> Result<()> {
        Ok(())
    }
}
