//! Pipeline configuration. Config files are `key = value` text; keys are the
//! field names of [`PipelineConfig`], lists are comma separated and relative
//! paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use redb_core::cde::CdeConfig;
use redb_core::obc::{Bandwidth, ObcConfig};
use redb_core::{seed, IouKind};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::proto::DetectorHandle;
use crate::sim::{MockDetector, NeverDetector, SimSpec};

/// How OBC values are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObcSource {
    /// Pre-NMS boxes when the detector reports them, otherwise the curator
    /// runs NMS over the detector's boxes and counts against those.
    #[default]
    Auto,
    /// Every box gets the same OBC, so downsampling is uniform.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub delta_pos: f64,
    pub delta_cde: f64,
    pub delta_obc: f64,
    pub d: f64,
    pub s_r: u32,
    pub s_g: u32,
    pub s_delta: u32,
    pub ros_range: (f64, f64),
    pub total_epochs: u32,
    /// Epochs after the first at which labels are regenerated.
    pub label_epochs: Vec<u32>,
    pub num_classes: u32,
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    /// An external command, or `builtin:mock[:<sim spec>]` / `builtin:never`
    /// for in-process detectors.
    pub detector_command: String,
    pub detector_timeout: f64,
    pub handle_pool_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub max_objects_per_scene: usize,
    pub cde_max_source_attempts: usize,
    pub cde_keep_unplaced: bool,
    pub cde_iou: IouKind,
    pub bandwidth: Bandwidth,
    pub obc_source: ObcSource,
    /// Threshold of the curator's own NMS when pre-NMS boxes are missing.
    pub fallback_nms_iou: f64,
    /// Emit a scaled source manifest and train on it before round 1.
    pub pretrain: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            delta_pos: 0.6,
            delta_cde: 0.6,
            delta_obc: 0.3,
            d: 5.0,
            s_r: 5,
            s_g: 10,
            s_delta: 2,
            ros_range: (0.75, 1.25),
            total_epochs: 120,
            label_epochs: vec![31, 61, 91],
            num_classes: 3,
            source_manifest: PathBuf::new(),
            target_manifest: PathBuf::new(),
            detector_command: "builtin:mock".into(),
            detector_timeout: 60.0,
            handle_pool_size: 1,
            seed: 0,
            output_dir: PathBuf::from("redb-out"),
            max_objects_per_scene: 20,
            cde_max_source_attempts: 10,
            cde_keep_unplaced: true,
            cde_iou: IouKind::ThreeD,
            bandwidth: Bandwidth::Silverman,
            obc_source: ObcSource::Auto,
            fallback_nms_iou: 0.1,
            pretrain: false,
            jobs: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "delta_pos",
    "delta_cde",
    "delta_obc",
    "d",
    "s_r",
    "s_g",
    "s_delta",
    "ros_range",
    "total_epochs",
    "label_epochs",
    "num_classes",
    "source_manifest",
    "target_manifest",
    "detector_command",
    "detector_timeout",
    "handle_pool_size",
    "seed",
    "output_dir",
    "max_objects_per_scene",
    "cde_max_source_attempts",
    "cde_keep_unplaced",
    "cde_iou",
    "bandwidth",
    "obc_source",
    "fallback_nms_iou",
    "pretrain",
    "jobs",
];

fn iou_kind(key: &str, v: &str) -> Result<IouKind> {
    match v {
        "3d" => Ok(IouKind::ThreeD),
        "bev" => Ok(IouKind::Bev),
        _ => Err(Error::Config(format!("{key}: expected 3d or bev, got {v:?}"))),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() || p.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvFile::read(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new("")))
    }

    pub fn from_kv(kv: &KvFile, base: &Path) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = PipelineConfig::default();
        let mut c = PipelineConfig {
            delta_pos: kv.get_or("delta_pos", d.delta_pos)?,
            delta_cde: kv.get_or("delta_cde", d.delta_cde)?,
            delta_obc: kv.get_or("delta_obc", d.delta_obc)?,
            d: kv.get_or("d", d.d)?,
            s_r: kv.get_or("s_r", d.s_r)?,
            s_g: kv.get_or("s_g", d.s_g)?,
            s_delta: kv.get_or("s_delta", d.s_delta)?,
            ros_range: kv.pair("ros_range")?.unwrap_or(d.ros_range),
            total_epochs: kv.get_or("total_epochs", d.total_epochs)?,
            label_epochs: kv.list_or("label_epochs", d.label_epochs)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            source_manifest: kv.str("source_manifest").map_or(d.source_manifest, |p| resolve(base, p)),
            target_manifest: kv.str("target_manifest").map_or(d.target_manifest, |p| resolve(base, p)),
            detector_command: kv.str("detector_command").map_or(d.detector_command, str::to_string),
            detector_timeout: kv.get_or("detector_timeout", d.detector_timeout)?,
            handle_pool_size: kv.get_or("handle_pool_size", d.handle_pool_size)?,
            seed: kv.get_or("seed", d.seed)?,
            output_dir: kv.str("output_dir").map_or(d.output_dir, |p| resolve(base, p)),
            max_objects_per_scene: kv.get_or("max_objects_per_scene", d.max_objects_per_scene)?,
            cde_max_source_attempts: kv.get_or("cde_max_source_attempts", d.cde_max_source_attempts)?,
            cde_keep_unplaced: kv.bool("cde_keep_unplaced")?.unwrap_or(d.cde_keep_unplaced),
            cde_iou: match kv.str("cde_iou") {
                Some(v) => iou_kind("cde_iou", v)?,
                None => d.cde_iou,
            },
            bandwidth: match kv.str("bandwidth") {
                None | Some("silverman") => Bandwidth::Silverman,
                Some(v) => Bandwidth::Fixed(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bandwidth: expected silverman or a number, got {v:?}")))?,
                ),
            },
            obc_source: match kv.str("obc_source") {
                None | Some("auto") => ObcSource::Auto,
                Some("uniform") => ObcSource::Uniform,
                Some(v) => return Err(Error::Config(format!("obc_source: expected auto or uniform, got {v:?}"))),
            },
            fallback_nms_iou: kv.get_or("fallback_nms_iou", d.fallback_nms_iou)?,
            pretrain: kv.bool("pretrain")?.unwrap_or(d.pretrain),
            jobs: kv.get_or("jobs", d.jobs)?,
        };
        if let Some(rest) = c.detector_command.strip_prefix("builtin:mock:") {
            c.detector_command = format!("builtin:mock:{}", resolve(base, rest).display());
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.delta_pos) {
            return bad("delta_pos must lie in [0, 1]");
        }
        if !(self.delta_cde > 0.0 && self.delta_cde <= 1.0) {
            return bad("delta_cde must lie in (0, 1]");
        }
        if !(self.delta_obc > 0.0 && self.delta_obc < 1.0) {
            return bad("delta_obc must lie in (0, 1)");
        }
        if !(self.d > 1.0 && self.d.is_finite()) {
            return bad("d must exceed 1");
        }
        let (lo, hi) = self.ros_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("ros_range must satisfy 0 < lo <= hi");
        }
        if self.total_epochs < 1 {
            return bad("total_epochs must be at least 1");
        }
        let mut prev = 1;
        for &e in &self.label_epochs {
            if e <= prev || e > self.total_epochs {
                return bad("label_epochs must be strictly ascending within [2, total_epochs]");
            }
            prev = e;
        }
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1");
        }
        if self.handle_pool_size < 1 {
            return bad("handle_pool_size must be at least 1");
        }
        if self.max_objects_per_scene < 1 || self.cde_max_source_attempts < 1 {
            return bad("max_objects_per_scene and cde_max_source_attempts must be at least 1");
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return bad("bandwidth must be positive");
            }
        }
        if !(self.fallback_nms_iou > 0.0 && self.fallback_nms_iou < 1.0) {
            return bad("fallback_nms_iou must lie in (0, 1)");
        }
        if !(self.detector_timeout > 0.0 && self.detector_timeout.is_finite()) {
            return bad("detector_timeout must be positive");
        }
        if self.detector_command.trim().is_empty() {
            return bad("detector_command is empty");
        }
        Ok(())
    }

    pub fn cde_config(&self) -> CdeConfig {
        CdeConfig {
            delta_cde: self.delta_cde,
            delta_pos: self.delta_pos,
            max_objects_per_scene: self.max_objects_per_scene,
            rng_seed: self.seed,
            max_source_attempts: self.cde_max_source_attempts,
            keep_unplaced: self.cde_keep_unplaced,
            iou: self.cde_iou,
        }
    }

    /// The downsampling rng is keyed by round.
    pub fn obc_config(&self, round: u32) -> ObcConfig {
        ObcConfig {
            delta_obc: self.delta_obc,
            d: self.d,
            bandwidth: self.bandwidth,
            rng_seed: seed::derive(self.seed, &[b"obc", &round.to_le_bytes()]),
        }
    }

    /// Epochs at which labels are generated: 1, then `label_epochs`.
    pub fn round_epochs(&self) -> Vec<u32> {
        std::iter::once(1).chain(self.label_epochs.iter().copied()).collect()
    }

    /// `(key, value)` pairs of the effective configuration.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("delta_pos", self.delta_pos.to_string()),
            ("delta_cde", self.delta_cde.to_string()),
            ("delta_obc", self.delta_obc.to_string()),
            ("d", self.d.to_string()),
            ("s_r", self.s_r.to_string()),
            ("s_g", self.s_g.to_string()),
            ("s_delta", self.s_delta.to_string()),
            ("ros_range", format!("{},{}", self.ros_range.0, self.ros_range.1)),
            ("total_epochs", self.total_epochs.to_string()),
            ("label_epochs", list(&self.label_epochs)),
            ("num_classes", self.num_classes.to_string()),
            ("source_manifest", self.source_manifest.display().to_string()),
            ("target_manifest", self.target_manifest.display().to_string()),
            ("detector_command", self.detector_command.clone()),
            ("detector_timeout", self.detector_timeout.to_string()),
            ("handle_pool_size", self.handle_pool_size.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("max_objects_per_scene", self.max_objects_per_scene.to_string()),
            ("cde_max_source_attempts", self.cde_max_source_attempts.to_string()),
            ("cde_keep_unplaced", self.cde_keep_unplaced.to_string()),
            (
                "cde_iou",
                match self.cde_iou {
                    IouKind::ThreeD => "3d".into(),
                    IouKind::Bev => "bev".into(),
                },
            ),
            (
                "bandwidth",
                match self.bandwidth {
                    Bandwidth::Silverman => "silverman".into(),
                    Bandwidth::Fixed(s) => s.to_string(),
                },
            ),
            (
                "obc_source",
                match self.obc_source {
                    ObcSource::Auto => "auto".into(),
                    ObcSource::Uniform => "uniform".into(),
                },
            ),
            ("fallback_nms_iou", self.fallback_nms_iou.to_string()),
            ("pretrain", self.pretrain.to_string()),
            ("jobs", self.jobs.to_string()),
        ]
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.detector_timeout)
    }
}

/// Opens one detector handle from a command string. See
/// [`PipelineConfig::detector_command`].
pub fn open_detector(command: &str, timeout: Duration) -> Result<DetectorHandle> {
    let command = command.trim();
    if let Some(kind) = command.strip_prefix("builtin:") {
        return match kind {
            "never" => Ok(DetectorHandle::new(NeverDetector)),
            "mock" => Ok(DetectorHandle::new(MockDetector::new(SimSpec::default().mock)?)),
            _ => match kind.strip_prefix("mock:") {
                Some(path) => Ok(DetectorHandle::new(MockDetector::new(SimSpec::read(Path::new(path))?.mock)?)),
                None => Err(Error::Config(format!("unknown builtin detector {kind:?}"))),
            },
        };
    }
    let argv = shlex::split(command).ok_or_else(|| Error::Config(format!("cannot split command {command:?}")))?;
    DetectorHandle::spawn(&argv, timeout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = PipelineConfig::default();
        assert_eq!((c.delta_pos, c.delta_cde, c.delta_obc, c.d), (0.6, 0.6, 0.3, 5.0));
        assert_eq!((c.s_r, c.s_g, c.s_delta), (5, 10, 2));
        assert_eq!(c.total_epochs, 120);
        assert_eq!(c.round_epochs(), vec![1, 31, 61, 91]);
    }

    #[test]
    fn parse_and_validate() {
        let kv = KvFile::parse("label_epochs =\nsource_manifest = src/manifest.tsv\nbandwidth = 0.8\ncde_iou = bev\n").unwrap();
        let c = PipelineConfig::from_kv(&kv, Path::new("/cfg")).unwrap();
        assert!(c.label_epochs.is_empty());
        assert_eq!(c.round_epochs(), vec![1]);
        assert_eq!(c.source_manifest, PathBuf::from("/cfg/src/manifest.tsv"));
        assert_eq!(c.bandwidth, Bandwidth::Fixed(0.8));
        assert_eq!(c.cde_iou, IouKind::Bev);

        for bad in [
            "label_epochs = 1, 31",
            "label_epochs = 61, 31",
            "label_epochs = 31, 121",
            "delta_cde = 0",
            "d = 1",
            "total_epochs = 0",
            "bogus = 1",
            "ros_range = 1.2, 0.8",
        ] {
            let kv = KvFile::parse(bad).unwrap();
            assert!(PipelineConfig::from_kv(&kv, Path::new("")).is_err(), "{bad}");
        }
    }

    #[test]
    fn echoed_config_parses_back() {
        let c = PipelineConfig::default();
        let mut kv = KvFile::default();
        for (k, v) in c.pairs() {
            kv.set(k, v);
        }
        assert_eq!(PipelineConfig::from_kv(&kv, Path::new("")).unwrap(), c);
    }
}
