//! Simulation spec files.
//!
//! ```text
//! seed = 3
//! source.frames = 100
//! source.mix = 6, 3, 1
//! source.class1.mean = 1.8, 4.2, 1.55
//! target.subsample = 0.5
//! # center, log-size, yaw
//! mock.target_noise = 0.3, 0.1, 0.12
//! mock.shrink = 0.7
//! ```
//!
//! Every key is optional. Without explicit seeds, the domain and mock seeds
//! derive from `seed`.

use std::path::Path;

use redb_core::seed;

use super::domain::{ClassSpec, DomainSpec};
use super::mock::{MockDetectorSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::kv::KvFile;

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub mock: MockDetectorSpec,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec::with_seed(0)
    }
}

const DOMAIN_KEYS: &[&str] = &[
    "prefix",
    "frames",
    "objects_per_frame",
    "mix",
    "density",
    "subsample",
    "extent",
    "min_range",
    "gap",
    "clutter",
    "seed",
];

const MOCK_KEYS: &[&str] = &[
    "seed",
    "target_prefix",
    "source_noise",
    "source_miss",
    "source_fp_rate",
    "target_noise",
    "target_miss",
    "target_fp_rate",
    "dup_base",
    "dup_per_m2",
    "dup_per_10m",
    "dup_jitter",
    "nms_iou",
    "cell",
    "min_cluster_points",
    "fp_score",
    "shrink",
    "prenms",
    "train",
];

impl SimSpec {
    pub fn with_seed(master: u64) -> Self {
        let mut s = SimSpec {
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            mock: MockDetectorSpec::default(),
        };
        s.source.seed = seed::derive(master, &[b"source"]);
        s.target.seed = seed::derive(master, &[b"target"]);
        s.mock.seed = seed::derive(master, &[b"mock"]);
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        for key in kv.keys() {
            if !known_key(key) {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        let master = kv.get_or("seed", 0u64)?;
        let mut spec = SimSpec::with_seed(master);
        read_domain(kv, "source", &mut spec.source)?;
        read_domain(kv, "target", &mut spec.target)?;
        spec.mock.class_priors = spec.source.classes.iter().map(|c| c.mean).collect();
        read_mock(kv, &mut spec.mock)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate().map_err(|e| Error::Config(format!("source: {e}")))?;
        self.target.validate().map_err(|e| Error::Config(format!("target: {e}")))?;
        self.mock.validate().map_err(|e| Error::Config(format!("mock: {e}")))?;
        if self.source.prefix == self.target.prefix {
            return Err(Error::Config("source and target prefixes must differ".into()));
        }
        Ok(())
    }
}

fn known_key(key: &str) -> bool {
    if key == "seed" {
        return true;
    }
    let Some((scope, rest)) = key.split_once('.') else {
        return false;
    };
    match scope {
        "source" | "target" => DOMAIN_KEYS.contains(&rest) || class_key(rest).is_some(),
        "mock" => MOCK_KEYS.contains(&rest) || rest.strip_prefix("class").is_some_and(|n| n.parse::<usize>().is_ok()),
        _ => false,
    }
}

/// `class<i>.mean` or `class<i>.std`.
fn class_key(rest: &str) -> Option<(usize, &str)> {
    let (cls, field) = rest.split_once('.')?;
    let i: usize = cls.strip_prefix("class")?.parse().ok()?;
    (i >= 1 && (field == "mean" || field == "std")).then_some((i, field))
}

fn triple(kv: &KvFile, key: &str) -> Result<Option<[f64; 3]>> {
    match kv.list::<f64>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
        Some(_) => Err(Error::Config(format!("{key}: expected three values"))),
    }
}

fn read_domain(kv: &KvFile, scope: &str, d: &mut DomainSpec) -> Result<()> {
    let k = |name: &str| format!("{scope}.{name}");
    if let Some(p) = kv.str(&k("prefix")) {
        d.prefix = p.to_string();
    }
    d.frames = kv.get_or(&k("frames"), d.frames)?;
    if let Some(v) = kv.list::<usize>(&k("objects_per_frame"))? {
        d.objects_per_frame = match v[..] {
            [n] => (n, n),
            [lo, hi] => (lo, hi),
            _ => return Err(Error::Config(format!("{}: expected one or two counts", k("objects_per_frame")))),
        };
    }
    if let Some(mix) = kv.list::<f64>(&k("mix"))? {
        let defaults = d.classes.clone();
        d.classes = mix
            .iter()
            .enumerate()
            .map(|(i, &weight)| ClassSpec {
                weight,
                ..defaults.get(i).copied().unwrap_or(ClassSpec {
                    weight,
                    mean: [0.0; 3],
                    std: [0.0; 3],
                })
            })
            .collect();
    }
    for (i, c) in d.classes.iter_mut().enumerate() {
        if let Some(m) = triple(kv, &k(&format!("class{}.mean", i + 1)))? {
            c.mean = m;
        }
        if let Some(s) = triple(kv, &k(&format!("class{}.std", i + 1)))? {
            c.std = s;
        }
    }
    for key in kv.keys() {
        if let Some(rest) = key.strip_prefix(&format!("{scope}.")) {
            if let Some((i, _)) = class_key(rest) {
                if i > d.classes.len() {
                    return Err(Error::Config(format!("{key}: class {i} is not in the mix")));
                }
            }
        }
    }
    d.density = kv.get_or(&k("density"), d.density)?;
    d.subsample = kv.get_or(&k("subsample"), d.subsample)?;
    d.extent = kv.get_or(&k("extent"), d.extent)?;
    d.min_range = kv.get_or(&k("min_range"), d.min_range)?;
    d.gap = kv.get_or(&k("gap"), d.gap)?;
    d.clutter = kv.get_or(&k("clutter"), d.clutter)?;
    d.seed = kv.get_or(&k("seed"), d.seed)?;
    Ok(())
}

fn read_noise(kv: &KvFile, env: &str, n: &mut NoiseSpec) -> Result<()> {
    if let Some([c, s, y]) = triple(kv, &format!("mock.{env}_noise"))? {
        n.center = c;
        n.size = s;
        n.yaw = y;
    }
    n.miss = kv.get_or(&format!("mock.{env}_miss"), n.miss)?;
    n.fp_rate = kv.get_or(&format!("mock.{env}_fp_rate"), n.fp_rate)?;
    Ok(())
}

fn read_mock(kv: &KvFile, m: &mut MockDetectorSpec) -> Result<()> {
    m.seed = kv.get_or("mock.seed", m.seed)?;
    if let Some(p) = kv.str("mock.target_prefix") {
        m.target_prefix = p.to_string();
    }
    read_noise(kv, "source", &mut m.source)?;
    read_noise(kv, "target", &mut m.target)?;
    m.dup_base = kv.get_or("mock.dup_base", m.dup_base)?;
    m.dup_per_m2 = kv.get_or("mock.dup_per_m2", m.dup_per_m2)?;
    m.dup_per_10m = kv.get_or("mock.dup_per_10m", m.dup_per_10m)?;
    m.dup_jitter = kv.get_or("mock.dup_jitter", m.dup_jitter)?;
    m.nms_iou = kv.get_or("mock.nms_iou", m.nms_iou)?;
    m.cell = kv.get_or("mock.cell", m.cell)?;
    m.min_cluster_points = kv.get_or("mock.min_cluster_points", m.min_cluster_points)?;
    if let Some(r) = kv.pair("mock.fp_score")? {
        m.fp_score = r;
    }
    m.shrink = kv.get_or("mock.shrink", m.shrink)?;
    m.report_prenms = kv.bool("mock.prenms")?.unwrap_or(m.report_prenms);
    m.trainable = kv.bool("mock.train")?.unwrap_or(m.trainable);
    let mut i = 1;
    while let Some(p) = triple(kv, &format!("mock.class{i}"))? {
        if i > m.class_priors.len() {
            m.class_priors.push(p);
        } else {
            m.class_priors[i - 1] = p;
        }
        i += 1;
    }
    Ok(())
}
