use std::f64::consts::PI;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use redb_core::geom::{bev_intersection_area, point_in_footprint};
use redb_core::{seed, Box3D, LabelSet, Point, PointCloud};

use crate::error::{Error, Result};
use crate::io::{create_dir, write_labels, write_manifest, write_points, FrameManifest, ManifestEntry};

/// Size distribution of one class; `class_id` is its position plus one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSpec {
    /// Relative frequency.
    pub weight: f64,
    /// Mean `(w, l, h)` in meters.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Frame ids are `<prefix>_<index>`.
    pub prefix: String,
    pub frames: usize,
    /// Inclusive range of objects per frame.
    pub objects_per_frame: (usize, usize),
    pub classes: Vec<ClassSpec>,
    /// Object points per m² of footprint, before subsampling.
    pub density: f64,
    /// Fraction of object points kept; models a sensor with fewer beams.
    pub subsample: f64,
    /// Scenes span `[-extent, extent]²`.
    pub extent: f64,
    /// No object closer than this to the sensor.
    pub min_range: f64,
    /// Clearance between object footprints, and between clutter and objects.
    pub gap: f64,
    /// Isolated background points per frame.
    pub clutter: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            prefix: "src".into(),
            frames: 100,
            objects_per_frame: (6, 10),
            classes: vec![
                ClassSpec { weight: 6.0, mean: [1.8, 4.2, 1.55], std: [0.08, 0.2, 0.06] },
                ClassSpec { weight: 3.0, mean: [0.6, 0.9, 1.75], std: [0.04, 0.06, 0.06] },
                ClassSpec { weight: 1.0, mean: [0.6, 1.8, 1.7], std: [0.04, 0.1, 0.06] },
            ],
            density: 60.0,
            subsample: 1.0,
            extent: 40.0,
            min_range: 3.0,
            gap: 1.5,
            clutter: 150,
            seed: 1,
        }
    }

    /// Larger objects seen by a sparser sensor.
    pub fn target() -> Self {
        DomainSpec {
            prefix: "tgt".into(),
            frames: 200,
            classes: vec![
                ClassSpec { weight: 6.0, mean: [1.95, 4.7, 1.7], std: [0.08, 0.2, 0.06] },
                ClassSpec { weight: 3.0, mean: [0.65, 0.95, 1.8], std: [0.04, 0.06, 0.06] },
                ClassSpec { weight: 1.0, mean: [0.65, 1.9, 1.75], std: [0.04, 0.1, 0.06] },
            ],
            subsample: 0.5,
            seed: 2,
            ..DomainSpec::source()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        crate::io::check_frame_id(&self.prefix)?;
        if self.classes.is_empty() {
            return Err("at least one class is required".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            let ok = c.weight >= 0.0
                && c.weight.is_finite()
                && c.mean.iter().all(|&m| m > 0.0 && m.is_finite())
                && c.std.iter().all(|&s| s >= 0.0 && s.is_finite());
            if !ok {
                return Err(format!("class {}: means must be positive, weights and stds non-negative", i + 1));
            }
        }
        if self.classes.iter().all(|c| c.weight == 0.0) {
            return Err("at least one class weight must be positive".into());
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err("density must be positive".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err("subsample must lie in (0, 1]".into());
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) || !(self.min_range >= 0.0) || self.min_range >= self.extent {
            return Err("need 0 <= min_range < extent".into());
        }
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return Err("gap must be non-negative".into());
        }
        if self.objects_per_frame.0 > self.objects_per_frame.1 {
            return Err("objects_per_frame range is empty".into());
        }
        Ok(())
    }

    pub fn frame_id(&self, index: usize) -> String {
        format!("{}_{index:04}", self.prefix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub frame_id: String,
    pub cloud: PointCloud,
    /// Ground truth.
    pub labels: LabelSet,
}

/// Values as they come back from a single-precision point file.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Frames of clutter and objects with exact ground truth. Each frame has its
/// own derived stream, so frames are generated in parallel.
pub fn generate_domain(spec: &DomainSpec) -> Result<Vec<SimFrame>> {
    spec.validate().map_err(Error::Validation)?;
    Ok((0..spec.frames)
        .into_par_iter()
        .map(|i| generate_frame(spec, i))
        .collect())
}

pub fn generate_frame(spec: &DomainSpec, index: usize) -> SimFrame {
    let frame_id = spec.frame_id(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[b"frame", frame_id.as_bytes()]));
    let mix = WeightedIndex::new(spec.classes.iter().map(|c| c.weight)).expect("validated weights");
    let n_objects = rng.random_range(spec.objects_per_frame.0..=spec.objects_per_frame.1);
    let half_gap = 0.5 * spec.gap;

    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = mix.sample(&mut rng);
        let c = &spec.classes[class];
        let dims: [f64; 3] = std::array::from_fn(|k| (c.mean[k] + c.std[k] * normal(&mut rng)).max(0.3 * c.mean[k]));
        for _ in 0..50 {
            let x = rng.random_range(-spec.extent..spec.extent);
            let y = rng.random_range(-spec.extent..spec.extent);
            if x.hypot(y) < spec.min_range {
                continue;
            }
            let yaw = rng.random_range(-PI..PI);
            let b = Box3D::new([x, y, 0.5 * dims[2]], dims, yaw, class as u32 + 1).expect("positive dims");
            let grown = b.enlarged_bev(half_gap);
            if boxes.iter().all(|o| bev_intersection_area(&grown, &o.enlarged_bev(half_gap)) == 0.0) {
                boxes.push(b);
                break;
            }
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        let n = (spec.density * b.footprint_area()).round() as usize;
        for _ in 0..n {
            let local = [
                b.w * rng.random_range(-0.499..0.499),
                b.l * rng.random_range(-0.499..0.499),
                b.h * rng.random_range(-0.499..0.499),
            ];
            let intensity = rng.random::<f64>();
            if rng.random::<f64>() >= spec.subsample {
                continue;
            }
            let w = b.to_world(local);
            points.push(Point::new(f32_exact(w[0]), f32_exact(w[1]), f32_exact(w[2]), f32_exact(intensity)));
        }
    }
    for _ in 0..spec.clutter {
        for _ in 0..20 {
            let x = rng.random_range(-spec.extent..spec.extent);
            let y = rng.random_range(-spec.extent..spec.extent);
            let z = rng.random_range(0.0..2.5);
            let intensity = rng.random::<f64>();
            if boxes.iter().any(|b| point_in_footprint(x, y, b, spec.gap)) {
                continue;
            }
            points.push(Point::new(f32_exact(x), f32_exact(y), f32_exact(z), f32_exact(intensity)));
            break;
        }
    }

    SimFrame {
        labels: LabelSet::new(frame_id.clone(), boxes),
        cloud: PointCloud::new(points),
        frame_id,
    }
}

/// Writes `dir/points/*.bin`, `dir/labels/*.txt` and `dir/manifest.tsv`
/// with paths relative to `dir`.
pub fn write_domain(frames: &[SimFrame], dir: &Path) -> Result<FrameManifest> {
    create_dir(&dir.join("points"))?;
    create_dir(&dir.join("labels"))?;
    let entries = frames
        .par_iter()
        .map(|f| {
            let points = Path::new("points").join(format!("{}.bin", f.frame_id));
            let labels = Path::new("labels").join(format!("{}.txt", f.frame_id));
            write_points(&f.cloud, &dir.join(&points))?;
            write_labels(&f.labels, &dir.join(&labels))?;
            Ok(ManifestEntry {
                frame_id: f.frame_id.clone(),
                points,
                labels: Some(labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = FrameManifest { entries };
    write_manifest(&manifest, &dir.join("manifest.tsv"))?;
    Ok(manifest)
}
