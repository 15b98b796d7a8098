//! The `redb` command line.
//!
//! Stage subcommands read and write the files the round loop emits, so a
//! round can be replayed one stage at a time. Flags that mirror a config key
//! override the value from `--config`. Exit status is 0 on success, 1 for
//! usage and validation errors, 2 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use redb_core::balance::bank_objects;
use redb_core::geom::{bev_iou, iou_3d};
use redb_core::{Box3D, LabelSet, ObjectPool, Provenance};

use crate::config::{open_detector, ObcSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::io::{create_dir, read_labels, read_manifest, write_text, FrameManifest};
use crate::kv::KvFile;
use crate::proto::{serve, DetectorHandle};
use crate::sim::{evaluate, generate_domain, write_domain, MockDetector, SimSpec};
use crate::stages::{
    build_gt_pool, class_table, confident_labels, infer_targets, inject_frames, injection_text, load_frames,
    load_source_frames, run_cde, run_obc, summarize_injections, write_injected, write_label_dir, write_red, Frame,
    InjectionParams,
};

#[derive(Debug, Parser)]
#[command(name = "redb", version, about = "Pseudo-label curation for domain-adaptive 3D detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every labeling round and train call.
    Run(RunArgs),
    /// Cross-domain examination of pseudo labels.
    Cde(CdeArgs),
    /// OBC scoring and diversity downsampling.
    Obc(ObcArgs),
    /// Balanced injection of source and ReD objects into target frames.
    Sample(SampleArgs),
    /// Write a synthetic source/target dataset.
    SimGen(SimGenArgs),
    /// Serve the detector protocol on stdin/stdout with the mock detector.
    MockDetector(MockArgs),
    /// Per-class precision and recall of pseudo labels.
    Eval(EvalArgs),
    /// BEV and 3D IoU of two boxes.
    Iou(IouArgs),
}

/// Flags shared by every command that reads a pipeline config.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Pipeline config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Detector command (`detector_command`).
    #[arg(long)]
    pub detector: Option<String>,
    /// Target manifest (`target_manifest`).
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Output directory (`output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CdeArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Source manifest (`source_manifest`).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Directory of `<frame_id>.txt` pseudo labels; without it the detector
    /// labels the target frames.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub delta_cde: Option<f64>,
    #[arg(long)]
    pub delta_pos: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub round: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ObcArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Directory of `<frame_id>.txt` pseudo labels; without it the
    /// detector's confident boxes are used.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub delta_obc: Option<f64>,
    #[arg(long)]
    pub delta_pos: Option<f64>,
    #[arg(long)]
    pub d: Option<f64>,
    /// `silverman` or a fixed bandwidth.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// `auto` or `uniform`.
    #[arg(long)]
    pub obc_source: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub round: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Source manifest (`source_manifest`), the ground-truth object pool.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// ReD manifest as written by `obc`; without it only source objects are
    /// injected.
    #[arg(long)]
    pub red: Option<PathBuf>,
    /// Directory of `<frame_id>.txt` pseudo labels; defaults to the target
    /// manifest's labels.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub s_r: Option<u32>,
    #[arg(long)]
    pub s_g: Option<u32>,
    #[arg(long)]
    pub num_classes: Option<u32>,
    /// `lo,hi` scale range for source objects.
    #[arg(long)]
    pub ros_range: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub round: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimGenArgs {
    /// Simulation spec; defaults apply without it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<frame_id>.txt` labels to score.
    #[arg(long)]
    pub pseudo: PathBuf,
    /// Manifest with ground-truth labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// 3D IoU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

#[derive(Debug, Args)]
pub struct IouArgs {
    /// `cx,cy,cz,w,l,h,yaw`
    #[arg(long, allow_hyphen_values = true)]
    pub a: String,
    #[arg(long, allow_hyphen_values = true)]
    pub b: String,
}

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match cli.command.execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("redb: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

impl Command {
    pub fn execute(self) -> Result<()> {
        match self {
            Command::Run(a) => run(a),
            Command::Cde(a) => cde(a),
            Command::Obc(a) => obc(a),
            Command::Sample(a) => sample(a),
            Command::SimGen(a) => sim_gen(a),
            Command::MockDetector(a) => mock_detector(a),
            Command::Eval(a) => eval(a),
            Command::Iou(a) => iou(a),
        }
    }
}

/// Config keys set from flags.
#[derive(Default)]
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn set(&mut self, key: &'static str, value: Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((key, v.to_string()));
        }
        self
    }

    /// Paths from the command line resolve against the working directory.
    fn path(&mut self, key: &'static str, value: Option<&Path>) -> Result<&mut Self> {
        if let Some(p) = value {
            let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
            self.0.push((key, abs.display().to_string()));
        }
        Ok(self)
    }
}

fn load_config(common: &ConfigArgs, mut extra: Overrides) -> Result<PipelineConfig> {
    let (mut kv, base) = match &common.config {
        Some(path) => (KvFile::read(path)?, path.parent().unwrap_or(Path::new("")).to_path_buf()),
        None => (KvFile::default(), PathBuf::new()),
    };
    extra
        .set("seed", common.seed)
        .set("jobs", common.jobs)
        .set("detector_command", common.detector.as_ref())
        .path("target_manifest", common.target.as_deref())?;
    for (k, v) in extra.0 {
        kv.set(k, v);
    }
    PipelineConfig::from_kv(&kv, &base)
}

fn with_pool<T>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?
        .install(f)
}

fn require(path: &Path, key: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    Ok(())
}

fn open_handles(cfg: &PipelineConfig) -> Result<Vec<DetectorHandle>> {
    (0..cfg.handle_pool_size)
        .map(|_| open_detector(&cfg.detector_command, cfg.timeout()))
        .collect()
}

fn load_targets(cfg: &PipelineConfig) -> Result<Vec<Frame>> {
    require(&cfg.target_manifest, "target_manifest")?;
    load_frames(&read_manifest(&cfg.target_manifest)?).into_iter().collect()
}

/// `<dir>/<frame_id>.txt` for every frame; a missing file means no boxes.
fn read_label_dir(dir: &Path, frames: &[&Frame]) -> Result<Vec<LabelSet>> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("{}: not a directory", dir.display())));
    }
    frames
        .iter()
        .map(|f| {
            let path = dir.join(format!("{}.txt", f.frame_id));
            if path.exists() {
                read_labels(&path, &f.frame_id)
            } else {
                Ok(LabelSet::new(f.frame_id.clone(), Vec::new()))
            }
        })
        .collect()
}

fn run(a: RunArgs) -> Result<()> {
    if a.common.config.is_none() {
        return Err(Error::Config("run needs --config".into()));
    }
    let mut o = Overrides::default();
    o.path("output_dir", a.out.as_deref())?;
    let cfg = load_config(&a.common, o)?;
    require(&cfg.source_manifest, "source_manifest")?;
    require(&cfg.target_manifest, "target_manifest")?;
    let out = cfg.output_dir.clone();
    for r in crate::pipeline::run(cfg)? {
        println!(
            "round {} epoch {} raw {} kept {} red {} manifest {}",
            r.round_index,
            r.epoch,
            r.raw_pseudo,
            r.cde_kept.map_or("-".into(), |k| k.to_string()),
            r.red_size,
            r.manifest.display()
        );
    }
    println!("events {}", out.join("events.log").display());
    Ok(())
}

fn cde(a: CdeArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("delta_cde", a.delta_cde).set("delta_pos", a.delta_pos).path("source_manifest", a.source.as_deref())?;
    let cfg = load_config(&a.common, o)?;
    require(&cfg.source_manifest, "source_manifest")?;
    with_pool(cfg.jobs, || {
        let log = EventLog::sink(true);
        let targets = load_targets(&cfg)?;
        let sources = load_source_frames(&read_manifest(&cfg.source_manifest)?, &log)?;
        if sources.is_empty() {
            return Err(Error::Validation("no readable source frame".into()));
        }
        let mut handles = open_handles(&cfg)?;
        let (frames, pseudo) = match &a.pseudo {
            Some(dir) => {
                let frames: Vec<&Frame> = targets.iter().collect();
                let pseudo = read_label_dir(dir, &frames)?;
                (frames, pseudo)
            }
            None => {
                let inf = infer_targets(&mut handles, &targets, None, a.round, &log)?;
                let pseudo = confident_labels(&inf.results, cfg.delta_pos);
                (inf.frames, pseudo)
            }
        };
        let out = run_cde(&mut handles, &frames, &pseudo, &sources, &cfg.cde_config(), cfg.seed, a.round, &log)?;
        create_dir(&a.out)?;
        write_text(&a.out.join("cde_verdicts.txt"), &out.verdict_text())?;
        write_label_dir(&a.out.join("pseudo"), &out.kept)?;
        let raw: usize = pseudo.iter().map(|l| l.boxes.len()).sum();
        println!(
            "raw {raw} kept {} unexamined {} scenes {} failed_frames {}",
            out.kept_count(),
            out.unexamined_count(),
            out.scenes,
            out.failed.len()
        );
        Ok(())
    })
}

fn obc(a: ObcArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("delta_obc", a.delta_obc)
        .set("delta_pos", a.delta_pos)
        .set("d", a.d)
        .set("bandwidth", a.bandwidth.as_ref())
        .set("obc_source", a.obc_source.as_ref());
    let cfg = load_config(&a.common, o)?;
    with_pool(cfg.jobs, || {
        let log = EventLog::sink(true);
        let targets = load_targets(&cfg)?;
        let mut handles = open_handles(&cfg)?;
        let fallback = (cfg.obc_source == ObcSource::Auto).then_some(cfg.fallback_nms_iou);
        let inf = infer_targets(&mut handles, &targets, fallback, a.round, &log)?;
        let pseudo = match &a.pseudo {
            Some(dir) => read_label_dir(dir, &inf.frames)?,
            None => confident_labels(&inf.results, cfg.delta_pos),
        };
        let prenms: Vec<&[Box3D]> = inf.results.iter().map(|r| r.prenms.as_slice()).collect();
        let uniform = cfg.obc_source == ObcSource::Uniform;
        let out = run_obc(&inf.frames, &pseudo, &prenms, &cfg.obc_config(a.round), uniform)?;
        let ids: Vec<&str> = inf.frames.iter().map(|f| f.frame_id.as_str()).collect();
        create_dir(&a.out)?;
        write_text(&a.out.join("obc.txt"), &out.report_text(&ids))?;
        write_red(&a.out, &out.red, &inf.frames)?;
        println!(
            "pool {} sigma {} red {}",
            out.pool_size(),
            out.sigma.map_or("-".into(), |s| format!("{s:.6}")),
            out.red.len()
        );
        Ok(())
    })
}

fn sample(a: SampleArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("s_r", a.s_r)
        .set("s_g", a.s_g)
        .set("num_classes", a.num_classes)
        .set("ros_range", a.ros_range.as_ref())
        .path("source_manifest", a.source.as_deref())?;
    let cfg = load_config(&a.common, o)?;
    require(&cfg.source_manifest, "source_manifest")?;
    with_pool(cfg.jobs, || {
        let log = EventLog::sink(true);
        let targets = load_targets(&cfg)?;
        let frames: Vec<&Frame> = targets.iter().collect();
        let pseudo = match &a.pseudo {
            Some(dir) => read_label_dir(dir, &frames)?,
            None => frames
                .iter()
                .map(|f| f.labels.clone().unwrap_or_else(|| LabelSet::new(f.frame_id.clone(), Vec::new())))
                .collect(),
        };
        let gt_pool = build_gt_pool(&load_source_frames(&read_manifest(&cfg.source_manifest)?, &log)?);
        let red_pool = match &a.red {
            Some(path) => red_pool(&read_manifest(path)?)?,
            None => ObjectPool::from_entries(Provenance::TargetPseudo, Vec::new())?,
        };
        let params = InjectionParams {
            s_r: cfg.s_r,
            s_g: cfg.s_g,
            num_classes: cfg.num_classes,
            master_seed: cfg.seed,
            round: a.round,
        };
        let injections = inject_frames(&frames, &pseudo, &red_pool, &gt_pool, cfg.ros_range, &params)?;
        create_dir(&a.out)?;
        write_injected(&a.out, &injections)?;
        write_text(&a.out.join("injections.txt"), &injection_text(&injections))?;
        let table = class_table(&summarize_injections(&injections, &red_pool, &gt_pool, &params));
        write_text(&a.out.join("report.txt"), &table)?;
        print!("{table}");
        Ok(())
    })
}

fn red_pool(manifest: &FrameManifest) -> Result<ObjectPool> {
    manifest.require_labels().map_err(Error::Validation)?;
    let mut entries = Vec::new();
    for f in load_frames(manifest) {
        let f = f?;
        let labels = f.labels.unwrap_or_default();
        entries.extend(bank_objects(&f.cloud, &labels, Provenance::TargetPseudo));
    }
    Ok(ObjectPool::from_entries(Provenance::TargetPseudo, entries)?)
}

fn sim_spec(spec: Option<&Path>, seed: Option<u64>) -> Result<(SimSpec, KvFile)> {
    let mut kv = match spec {
        Some(p) => KvFile::read(p)?,
        None => KvFile::default(),
    };
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    Ok((SimSpec::from_kv(&kv)?, kv))
}

fn sim_gen(a: SimGenArgs) -> Result<()> {
    let (spec, kv) = sim_spec(a.spec.as_deref(), a.seed)?;
    let source = generate_domain(&spec.source)?;
    let target = generate_domain(&spec.target)?;
    create_dir(&a.out)?;
    write_domain(&source, &a.out.join("source"))?;
    write_domain(&target, &a.out.join("target"))?;
    write_text(&a.out.join("sim.spec"), &kv.to_text())?;
    let seed = kv.get_or("seed", 0u64)?;
    write_text(
        &a.out.join("redb.conf"),
        &format!(
            "source_manifest = source/manifest.tsv\ntarget_manifest = target/manifest.tsv\n\
             detector_command = builtin:mock:sim.spec\noutput_dir = run\nseed = {seed}\n"
        ),
    )?;
    println!("source {} frames", source.len());
    println!("target {} frames", target.len());
    println!("config {}", a.out.join("redb.conf").display());
    Ok(())
}

fn mock_detector(a: MockArgs) -> Result<()> {
    let (spec, _) = sim_spec(a.spec.as_deref(), a.seed)?;
    let mut det = MockDetector::new(spec.mock)?;
    serve(&mut det, std::io::stdin().lock(), std::io::stdout().lock())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Error::Validation("iou must lie in (0, 1]".into()));
    }
    let manifest = read_manifest(&a.truth)?;
    manifest.require_labels().map_err(Error::Validation)?;
    let mut truth = Vec::with_capacity(manifest.len());
    let mut pseudo = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let labels = e.labels.as_deref().expect("checked above");
        truth.push(read_labels(labels, &e.frame_id)?);
        let p = a.pseudo.join(format!("{}.txt", e.frame_id));
        pseudo.push(if p.exists() {
            read_labels(&p, &e.frame_id)?
        } else {
            LabelSet::new(e.frame_id.clone(), Vec::new())
        });
    }
    print!("{}", evaluate(&pseudo, &truth, a.iou)?.to_text());
    Ok(())
}

/// `cx,cy,cz,w,l,h,yaw`
pub fn parse_box(s: &str) -> Result<Box3D> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Validation(format!("box {s:?}: {e}")))?;
    let [cx, cy, cz, w, l, h, yaw] = v[..] else {
        return Err(Error::Validation(format!("box {s:?}: expected 7 values")));
    };
    Ok(Box3D::new([cx, cy, cz], [w, l, h], yaw, 1)?)
}

fn iou(a: IouArgs) -> Result<()> {
    let (x, y) = (parse_box(&a.a)?, parse_box(&a.b)?);
    println!("bev={:.6} 3d={:.6}", bev_iou(&x, &y), iou_3d(&x, &y));
    Ok(())
}
