//! Command implementations behind the `arcnn` binary.
//!
//! Every command writes its artifacts plus one `run_manifest.json` into the
//! output directory. Data goes to files; diagnostics go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use arcnn::annot::{
    load_detections, parse_annotations_unchecked, reasonable_filter, shift_statistics, validate,
    Detection, EvalFrame, FrameAnnotation, Modality,
};
use arcnn::arcnn::{
    checkpoint_to_string, load_checkpoint, ArcnnDetector, ArcnnModel, DetectorConfig, FusionMode,
    ModelConfig,
};
use arcnn::eval::{
    emit_report, mr_score, shift_grid_sweep, Detector, Report, ReportFormat, ShiftSet,
};
use arcnn::exec::{stream_seed, with_thread_limit};
use arcnn::synthtrain::{generate_dataset, load_dataset, save_dataset, train, SceneConfig, SceneFrame, TrainConfig};
use arcnn::Execution;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const STATS_FILE: &str = "stats.json";
pub const THREADS_ENV: &str = "ARCNN_THREADS";

const TRAIN_STREAM: u64 = 0x7124;

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for failed runs and validation diagnostics.
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "arcnn", version, about = "Weakly aligned two-modality detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Check an annotation file (or dataset directory).
    Validate(ValidateArgs),
    /// Shift histogram and unpaired fraction of an annotation set.
    Stats(StatsArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score a detector or a detections file.
    Eval(EvalArgs),
    /// Evaluate a detector over shifted copies of a dataset.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON); missing sections use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `frames` from the config.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub annotations: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub annotations: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; generated from the config's scene section when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub enable_rfa: Option<bool>,
    #[arg(long)]
    pub enable_jitter: Option<bool>,
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Required unless `--detections` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score these detections instead of running a model.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, default_value = "reference")]
    pub modality: Modality,
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `full`, `directions` or `custom:FILE`.
    #[arg(long, default_value = "full")]
    pub grid: GridSpec,
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
    /// Also write one CSV row per mode to this file.
    #[arg(long)]
    pub mode_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridSpec {
    Full,
    Directions,
    Custom(PathBuf),
}

impl std::str::FromStr for GridSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(GridSpec::Full),
            "directions" => Ok(GridSpec::Directions),
            _ => match s.strip_prefix("custom:") {
                Some(p) if !p.is_empty() => Ok(GridSpec::Custom(p.into())),
                _ => Err(format!("unknown grid '{s}' (full|directions|custom:FILE)")),
            },
        }
    }
}

/// Radius of the full grid (13 x 13 modes).
pub const FULL_GRID_RADIUS: i32 = 6;

impl GridSpec {
    pub fn shift_set(&self) -> anyhow::Result<ShiftSet> {
        Ok(match self {
            GridSpec::Full => ShiftSet::full(FULL_GRID_RADIUS),
            GridSpec::Directions => ShiftSet::directions(arcnn::eval::DIRECTION_RADIUS),
            GridSpec::Custom(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading grid file {}", p.display()))?;
                ShiftSet::custom(parse_modes(&text)?)?
            }
        })
    }
}

/// `[[dx, dy], ...]` as JSON, or one `dx,dy` (or `dx dy`) pair per line.
pub fn parse_modes(text: &str) -> anyhow::Result<Vec<(i32, i32)>> {
    if let Ok(v) = serde_json::from_str::<Vec<(i32, i32)>>(text) {
        return Ok(v);
    }
    let mut modes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let [a, b] = parts[..] else {
            bail!("grid file line {}: expected 'dx,dy'", n + 1);
        };
        let p = |s: &str| s.parse::<i32>().map_err(|_| anyhow!("grid file line {}: '{s}' is not an integer", n + 1));
        modes.push((p(a)?, p(b)?));
    }
    if modes.is_empty() {
        bail!("grid file lists no modes");
    }
    Ok(modes)
}

/// Ignore rules applied before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub min_height: f64,
    pub allow_occluded: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            min_height: 32.0,
            allow_occluded: false,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frames: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 200,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub artifact_paths: Vec<String>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub timestamp: u64,
}

fn write_manifest(out: &Path, command: &str, config: &RunConfig, seed: Option<u64>, artifacts: &[PathBuf]) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_hash: config.hash(),
        seed,
        artifact_paths: artifacts.iter().map(|p| p.display().to_string()).collect(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Worker limit from `ARCNN_THREADS`, if set.
pub fn thread_limit() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| anyhow!("{THREADS_ENV} must be a non-negative integer, got '{v}'")),
        Err(_) => Ok(None),
    }
}

/// A command failure, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
    /// Diagnostics were already printed.
    Diagnostics(usize),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Run(_) | Failure::Diagnostics(_) => EXIT_FAILURE,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<arcnn::Error> for Failure {
    fn from(e: arcnn::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let threads = usage(thread_limit())?;
    with_thread_limit(threads, move || match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Validate(a) => cmd_validate(&a.annotations),
        Command::Stats(a) => cmd_stats(&a.annotations, &a.out),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    })
}

fn annotations_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("annotations.json")
    } else {
        p.to_path_buf()
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), Failure> {
    let mut config = usage(RunConfig::load(a.common.config.as_deref()))?;
    if let Some(s) = a.common.seed {
        config.scene.seed = s;
    }
    if let Some(n) = a.frames {
        config.frames = n;
    }
    usage(config.scene.validate().map_err(Into::into))?;
    create_out(&a.common.out)?;
    let frames = generate_dataset(&config.scene, config.frames, Execution::Parallel)?;
    save_dataset(&a.common.out, &frames, Some(&config.scene))?;
    let artifacts: Vec<PathBuf> = ["annotations.json", "manifest.json", "images.bin"]
        .iter()
        .map(|f| a.common.out.join(f))
        .collect();
    write_manifest(&a.common.out, "generate", &config, Some(config.scene.seed), &artifacts)?;
    Ok(())
}

fn read_annotations(path: &Path) -> Result<Vec<FrameAnnotation>, Failure> {
    let path = annotations_path(path);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_annotations_unchecked(&text)?)
}

/// Prints one line per violation to stderr.
pub fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let frames = read_annotations(path)?;
    let diags = validate(&frames);
    for d in &diags {
        eprintln!("{d}");
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Failure::Diagnostics(diags.len()))
    }
}

pub fn cmd_stats(path: &Path, out: &Path) -> Result<(), Failure> {
    cmd_validate(path)?;
    let frames = read_annotations(path)?;
    let s = shift_statistics(&frames);
    println!("objects: {} (paired {}, unpaired {})", s.total(), s.paired, s.unpaired);
    println!("unpaired: {:.2}%", 100.0 * s.unpaired_fraction());
    println!("dx: mean {:.3} std {:.3}", s.mean_dx, s.std_dx);
    println!("dy: mean {:.3} std {:.3}", s.mean_dy, s.std_dy);
    println!("distance histogram (1 px bins):");
    for (k, c) in s.histogram.iter().enumerate() {
        println!("  [{k}, {}): {c}", k + 1);
    }
    create_out(out)?;
    let file = out.join(STATS_FILE);
    fs::write(&file, serde_json::to_string_pretty(&s).map_err(anyhow::Error::from)? + "\n")
        .with_context(|| format!("writing {}", file.display()))?;
    write_manifest(out, "stats", &RunConfig::default(), None, &[file])?;
    Ok(())
}

/// Effective configuration of a `train` invocation.
pub fn train_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(a.common.config.as_deref())?;
    if let Some(v) = a.enable_rfa {
        c.train.enable_rfa = v;
    }
    if let Some(v) = a.enable_jitter {
        c.train.enable_jitter = v;
    }
    if let Some(v) = a.fusion {
        c.train.fusion = v;
    }
    if let Some(v) = a.lr {
        c.train.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    c.model.enable_rfa = c.train.enable_rfa;
    c.model.fusion = c.train.fusion;
    c.train.validate()?;
    c.model.validate()?;
    c.scene.validate()?;
    Ok(c)
}

fn load_frames(data: &Path) -> Result<Vec<SceneFrame>, Failure> {
    let (frames, _) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if frames.is_empty() {
        return Err(Failure::Run(anyhow!("dataset {} has no frames", data.display())));
    }
    Ok(frames)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let config = usage(train_config(a))?;
    let seed = a.common.seed.unwrap_or(0);
    let frames = match &a.data {
        Some(d) => load_frames(d)?,
        None => generate_dataset(&config.scene, config.frames, Execution::Parallel)?,
    };
    create_out(&a.common.out)?;
    let model = ArcnnModel::new(config.model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TRAIN_STREAM, 0));
    let (model, report) = train(model, &frames, &config.train, &mut rng)?;

    let ckpt = a.common.out.join(CHECKPOINT_FILE);
    fs::write(&ckpt, checkpoint_to_string(&model)).with_context(|| format!("writing {}", ckpt.display()))?;
    let mut trace = String::from("epoch,iteration,learning_rate,rois,cls,confidence,shift,reg,total\n");
    for r in &report.trace {
        trace.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.iteration, r.learning_rate, r.rois, r.loss.cls, r.loss.confidence, r.loss.shift, r.loss.reg, r.total
        ));
    }
    let trace_path = a.common.out.join(TRACE_FILE);
    fs::write(&trace_path, trace).with_context(|| format!("writing {}", trace_path.display()))?;
    if report.positives_only_batches > 0 {
        eprintln!("warning: {} batches had no eligible negatives", report.positives_only_batches);
    }
    write_manifest(&a.common.out, "train", &config, Some(seed), &[ckpt, trace_path])?;
    Ok(())
}

/// Evaluation frames with the configured ignore marks.
pub fn eval_frames(frames: &[SceneFrame], settings: &EvalSettings) -> anyhow::Result<Vec<EvalFrame>> {
    let raw: Vec<EvalFrame> = frames.iter().map(|f| EvalFrame::unfiltered(f.annotation.clone())).collect();
    Ok(reasonable_filter(&raw, settings.min_height, settings.allow_occluded)?)
}

fn detector(checkpoint: &Path, config: &RunConfig, seed: Option<u64>) -> Result<ArcnnDetector, Failure> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut dc = config.detector;
    if let Some(s) = seed {
        dc.seed = s;
    }
    Ok(ArcnnDetector::new(model, dc))
}

fn report_path(out: &Path, format: ReportFormat) -> PathBuf {
    out.join(match format {
        ReportFormat::Json => "report.json",
        ReportFormat::Csv => "report.csv",
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let config = usage(RunConfig::load(a.common.config.as_deref()))?;
    if a.checkpoint.is_none() && a.detections.is_none() {
        return Err(Failure::Usage(anyhow!("eval needs --checkpoint or --detections")));
    }
    let frames = load_frames(&a.data)?;
    let evalf = eval_frames(&frames, &config.eval)?;
    let dets: Vec<Detection> = match (&a.detections, &a.checkpoint) {
        (Some(p), _) => load_detections(p).with_context(|| format!("loading detections {}", p.display()))?,
        (None, Some(ck)) => {
            let det = detector(ck, &config, a.common.seed)?;
            Execution::Parallel
                .try_map(&frames, |i, f| det.detect(f, i))?
                .into_iter()
                .flatten()
                .collect()
        }
        (None, None) => unreachable!("checked above"),
    };
    let result = mr_score(&evalf, &dets, a.modality)?;
    create_out(&a.common.out)?;
    let path = report_path(&a.common.out, a.format);
    emit_report(&Report::from_score(&result), &path, a.format)?;
    let mut artifacts = vec![path];
    artifacts.extend(a.detections.clone());
    write_manifest(&a.common.out, "eval", &config, a.common.seed, &artifacts)?;
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), Failure> {
    let config = usage(RunConfig::load(a.common.config.as_deref()))?;
    let set = usage(a.grid.shift_set())?;
    let frames = load_frames(&a.data)?;
    let evalf = eval_frames(&frames, &config.eval)?;
    let det = detector(&a.checkpoint, &config, a.common.seed)?;
    let result = shift_grid_sweep(&det, &frames, &evalf, &set, Execution::Parallel)?;
    create_out(&a.common.out)?;
    let report = Report::from_sweep(&result);
    let path = report_path(&a.common.out, a.format);
    emit_report(&report, &path, a.format)?;
    let mut artifacts = vec![path];
    if let Some(p) = &a.mode_csv {
        let mut s = String::from("dx,dy,mr\n");
        for e in &result.grid {
            s.push_str(&format!("{},{},{}\n", e.dx, e.dy, e.mr));
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
        artifacts.push(p.clone());
    }
    write_manifest(&a.common.out, "sweep", &config, a.common.seed, &artifacts)?;
    Ok(())
}
