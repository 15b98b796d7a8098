//! On-disk formats: KITTI-style point files, text label files and frame
//! manifests.
//!
//! * points: little-endian `f32` records `x y z intensity`, no header
//! * labels: one box per line, `class_id cx cy cz w l h yaw [score]`; lines
//!   starting with `#` and blank lines are skipped
//! * manifest: `frame_id<TAB>points_path[<TAB>labels_path]`; relative paths
//!   resolve against the manifest's directory

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use redb_core::{Box3D, LabelSet, Point, PointCloud};

use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode_points(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(format!(
            "truncated point file: {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let v: [f64; 4] = std::array::from_fn(|k| {
            let b = [rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]];
            f32::from_le_bytes(b) as f64
        });
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format!("record {i} holds a non-finite value"));
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    Ok(PointCloud::new(points))
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes `cloud` in single precision.
pub fn write_points(cloud: &PointCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    fs::write(path, encode_points(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path, frame_id: &str) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, frame_id).map_err(|msg| Error::format(path, msg))
}

pub fn parse_labels(text: &str, frame_id: &str) -> std::result::Result<LabelSet, String> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        boxes.push(parse_box_line(line).map_err(|e| format!("line {}: {e}", n + 1))?);
    }
    Ok(LabelSet::new(frame_id, boxes))
}

fn parse_box_line(line: &str) -> std::result::Result<Box3D, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 && fields.len() != 9 {
        return Err(format!("expected 8 or 9 fields, found {}", fields.len()));
    }
    let class: u32 = fields[0]
        .parse()
        .map_err(|_| format!("bad class id {:?}", fields[0]))?;
    let mut v = [0.0f64; 8];
    for (slot, s) in v.iter_mut().zip(&fields[1..]) {
        *slot = s.parse().map_err(|_| format!("bad number {s:?}"))?;
    }
    let b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class).map_err(|e| e.to_string())?;
    if fields.len() == 9 {
        b.with_score(v[7]).map_err(|e| e.to_string())
    } else {
        Ok(b)
    }
}

/// Label text with shortest round-trip number formatting.
pub fn format_labels(labels: &LabelSet) -> String {
    let mut out = String::new();
    for b in &labels.boxes {
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {}",
            b.class_id, b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw
        );
        if let Some(s) = b.score {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
    }
    out
}

pub fn write_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub points: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameManifest {
    pub entries: Vec<ManifestEntry>,
}

impl FrameManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            check_frame_id(&e.frame_id)?;
            if !seen.insert(e.frame_id.as_str()) {
                return Err(format!("duplicate frame id {:?}", e.frame_id));
            }
            if e.points.as_os_str().is_empty() || e.labels.as_ref().is_some_and(|l| l.as_os_str().is_empty()) {
                return Err(format!("empty path for frame {:?}", e.frame_id));
            }
        }
        Ok(())
    }

    /// Fails unless every entry carries a label path.
    pub fn require_labels(&self) -> std::result::Result<(), String> {
        match self.entries.iter().find(|e| e.labels.is_none()) {
            Some(e) => Err(format!("frame {:?} has no label path", e.frame_id)),
            None => Ok(()),
        }
    }

    pub fn entry(&self, frame_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.frame_id == frame_id)
    }
}

/// Frame ids double as file stems in emitted round directories.
pub fn check_frame_id(id: &str) -> std::result::Result<(), String> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.chars().any(|c| c == '/' || c == '\\' || c.is_whitespace() || c.is_control());
    if bad {
        Err(format!("invalid frame id {id:?}"))
    } else {
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<FrameManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let m = parse_manifest(&text, base).map_err(|msg| Error::format(path, msg))?;
    Ok(m)
}

pub fn parse_manifest(text: &str, base: &Path) -> std::result::Result<FrameManifest, String> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(format!("line {}: expected 2 or 3 tab-separated fields", n + 1));
        }
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.as_os_str().is_empty() || p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        entries.push(ManifestEntry {
            frame_id: fields[0].to_string(),
            points: resolve(fields[1]),
            labels: fields.get(2).map(|s| resolve(s)),
        });
    }
    let m = FrameManifest { entries };
    m.validate()?;
    Ok(m)
}

pub fn format_manifest(m: &FrameManifest) -> String {
    let mut out = String::new();
    for e in &m.entries {
        out.push_str(&e.frame_id);
        out.push('\t');
        out.push_str(&e.points.to_string_lossy());
        if let Some(l) = &e.labels {
            out.push('\t');
            out.push_str(&l.to_string_lossy());
        }
        out.push('\n');
    }
    out
}

/// Writes paths verbatim; relative paths are read back against the
/// manifest's own directory.
pub fn write_manifest(m: &FrameManifest, path: &Path) -> Result<()> {
    m.validate().map_err(Error::Validation)?;
    fs::write(path, format_manifest(m)).map_err(|e| Error::io(path, e))
}

/// Points and, when listed, labels of one manifest entry.
pub fn read_frame(entry: &ManifestEntry) -> Result<(PointCloud, Option<LabelSet>)> {
    let cloud = read_points(&entry.points)?;
    let labels = match &entry.labels {
        Some(p) => Some(read_labels(p, &entry.frame_id)?),
        None => None,
    };
    Ok((cloud, labels))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let cloud = PointCloud::new(vec![Point::new(1.5, -2.25, 0.125, 0.5), Point::new(0.1, 0.2, 0.3, 1.0)]);
        write_points(&cloud, &p).unwrap();
        let back = read_points(&p).unwrap();
        assert_eq!(back.points[0], cloud.points[0]);
        assert_eq!(back.points[1].x, 0.1f32 as f64);
        write_points(&back, &p).unwrap();
        assert_eq!(read_points(&p).unwrap(), back);

        fs::write(&p, []).unwrap();
        assert!(read_points(&p).unwrap().is_empty());

        fs::write(&p, [0u8; 17]).unwrap();
        let err = read_points(&p).unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("truncated"), "{err}");

        let mut nan = encode_points(&PointCloud::new(vec![Point::default()]));
        nan[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, nan).unwrap();
        assert!(read_points(&p).unwrap_err().to_string().contains("non-finite"));

        assert!(matches!(read_points(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let text = "# header\n1 1.5 2 0.75 1.8 4.2 1.5 0.3\n\n2 0 0 0.9 0.6 0.8 1.8 -1.2 0.93\n";
        let l = parse_labels(text, "f").unwrap();
        assert_eq!(l.boxes.len(), 2);
        assert_eq!(l.boxes[0].score, None);
        assert_eq!(l.boxes[1].score, Some(0.93));
        assert_eq!(l.boxes[1].class_id, 2);
        let again = parse_labels(&format_labels(&l), "f").unwrap();
        assert_eq!(again, l);

        assert!(parse_labels("1 0 0 0 1 1", "f").is_err());
        assert!(parse_labels("0 0 0 0 1 1 1 0", "f").is_err());
        assert!(parse_labels("1 0 0 0 -1 1 1 0", "f").is_err());
        assert!(parse_labels("1 0 0 0 1 1 1 0 1.5", "f").is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a\tpts/a.bin\tlab/a.txt\nb\t/abs/b.bin\n", Path::new("/data")).unwrap();
        assert_eq!(m.entries[0].points, PathBuf::from("/data/pts/a.bin"));
        assert_eq!(m.entries[0].labels, Some(PathBuf::from("/data/lab/a.txt")));
        assert_eq!(m.entries[1].points, PathBuf::from("/abs/b.bin"));
        assert!(m.require_labels().is_err());

        assert!(parse_manifest("a\tx.bin\na\ty.bin\n", Path::new("")).is_err());
        assert!(parse_manifest("a\t\n", Path::new("")).is_err());
        assert!(parse_manifest("a/b\tx.bin\n", Path::new("")).is_err());
        assert!(parse_manifest("a x.bin\n", Path::new("")).is_err());
    }
}
