//! Command-line front end: one JSON run configuration, flag overrides, and a
//! subcommand per pipeline stage.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::caption::{parse_caption, CaptionRecord};
use crate::curation::{curate, CurationConfig, ForegroundDetector};
use crate::dataset::{degrade_dataset, Dataset};
use crate::degradation::DegradationSpec;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::guidance::{
    calibrated_scale, guided_sample, sweep_scales, trace_jsonl, GradientMode, GuidanceConfig, PartLossVariant,
    SweepItem, SWEEP_SCALES,
};
use crate::image::ImageTensor;
use crate::metrics::MetricReport;
use crate::models::{Architecture, ModelParams};
use crate::rng::derive_seed;
use crate::synth::{generate_dataset, Split, SplitRatio, MANIFEST_NAME};
use crate::training::{train_codec, train_diffusion, train_parts, train_regressor, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_UNWRITABLE: i32 = 5;

/// Where each command reads and writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub degraded: PathBuf,
    pub checkpoints: PathBuf,
    pub restored: PathBuf,
    pub evaluation: PathBuf,
    pub sweep: PathBuf,
    pub curate_in: PathBuf,
    pub curate_out: PathBuf,
    pub marks: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "run/data".into(),
            degraded: "run/degraded".into(),
            checkpoints: "run/checkpoints".into(),
            restored: "run/restored".into(),
            evaluation: "run/evaluation".into(),
            sweep: "run/sweep".into(),
            curate_in: "run/raw".into(),
            curate_out: "run/curated".into(),
            marks: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub count: usize,
    pub split: SplitRatio,
}

impl Default for GenerateSection {
    fn default() -> Self {
        // 2,000 training and 200 test images with the 1/11 split.
        Self {
            count: 2200,
            split: SplitRatio::default(),
        }
    }
}

/// Training hyper-parameters; the seed comes from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            iterations: d.iterations,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

impl TrainSection {
    fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Default::default()
        }
    }

    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

/// Guidance settings; per-image sampling seeds come from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub scale: f64,
    pub mode: GradientMode,
    pub variant: PartLossVariant,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            scale: 0.0,
            mode: GradientMode::FullChain,
            variant: PartLossVariant::NormalizedL2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreSection {
    /// Restore one image instead of the test split.
    pub input: Option<PathBuf>,
    pub caption: Option<String>,
    /// Output file in single-image mode.
    pub output: Option<PathBuf>,
    /// Cap on the number of test images.
    pub limit: Option<usize>,
    /// Checkpoint to restore with; defaults to the diffusion checkpoint.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub scales: Vec<f64>,
    /// Number of test images used.
    pub count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            scales: SWEEP_SCALES.to_vec(),
            count: 20,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected; missing sections
/// take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generate: GenerateSection,
    pub degradation: DegradationSpec,
    pub model: Architecture,
    pub schedule: ScheduleConfig,
    pub regressor: TrainSection,
    pub parts: TrainSection,
    pub codec: TrainSection,
    pub diffusion: TrainSection,
    pub guidance: GuidanceSection,
    pub restore: RestoreSection,
    pub sweep: SweepSection,
    pub curation: CurationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            generate: GenerateSection::default(),
            degradation: DegradationSpec::default(),
            model: Architecture::default(),
            schedule: ScheduleConfig::default(),
            regressor: TrainSection::default(),
            parts: TrainSection::with_iterations(400),
            codec: TrainSection::with_iterations(1000),
            diffusion: TrainSection::default(),
            guidance: GuidanceSection::default(),
            restore: RestoreSection::default(),
            sweep: SweepSection::default(),
            curation: CurationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degradation.validate()?;
        self.schedule.build()?;
        for t in [&self.regressor, &self.parts, &self.codec, &self.diffusion] {
            t.to_config(0).validate()?;
        }
        self.guidance_config(0).validate()?;
        self.curation.validate()?;
        self.generate.split.test_count(self.generate.count)?;
        if self.sweep.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("sweep scales must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    pub fn degradation_seed(&self) -> u64 {
        derive_seed(self.seed, "degrade", 0)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    pub fn train_config(&self, component: &str) -> TrainConfig {
        let section = match component {
            "regressor" => &self.regressor,
            "parts" => &self.parts,
            "codec" => &self.codec,
            _ => &self.diffusion,
        };
        section.to_config(derive_seed(self.seed, &format!("train.{component}"), 0))
    }

    /// Sampling seed of the `index`-th restored image.
    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "restore", index as u64)
    }

    pub fn guidance_config(&self, index: usize) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.guidance.scale,
            mode: self.guidance.mode,
            seed: self.sample_seed(index),
            variant: self.guidance.variant,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn manifest(&self) -> PathBuf {
        self.paths.data.join(MANIFEST_NAME)
    }

    pub fn regressor_checkpoint(&self) -> PathBuf {
        self.paths.checkpoints.join("regressor.safetensors")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.restore
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.checkpoints.join("diffusion.safetensors"))
    }
}

#[derive(Parser, Debug)]
#[command(name = "body-restore", version, about = "Human-body image restoration experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic humanoids with pose, attention and part sidecars.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Degrade a generated dataset.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        blur: Option<f32>,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        jpeg: Option<u8>,
        #[arg(long)]
        downsample: Option<usize>,
    },
    /// Train the regression restorer on the training split.
    TrainRegressor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degraded: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train the part extractor, the codec and the conditional denoiser.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degraded: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Restore one image or the test split.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degraded: Option<PathBuf>,
        /// Output directory, or output file with `--input`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score restored images against the clean references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        restored: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degraded: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Screen, detect, normalise and queue raw images for review.
    Curate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        marks: Option<PathBuf>,
    },
    /// Compare guidance scales on part of the test split.
    SweepS {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degraded: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Degrade { common, .. }
            | Command::TrainRegressor { common, .. }
            | Command::TrainDiffusion { common, .. }
            | Command::Restore { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Curate { common, .. }
            | Command::SweepS { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Degrade { .. } => "degrade",
            Command::TrainRegressor { .. } => "train-regressor",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Restore { .. } => "restore",
            Command::Evaluate { .. } => "evaluate",
            Command::Curate { .. } => "curate",
            Command::SweepS { .. } => "sweep-s",
        }
    }

    /// Loads the configuration file (or defaults) and applies flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let common = self.common();
        let mut c = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            c.seed = s;
        }
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        match self {
            Command::Gen { out, n, .. } => {
                set(&mut c.paths.data, out);
                set(&mut c.generate.count, n);
            }
            Command::Degrade { data, out, blur, noise, jpeg, downsample, .. } => {
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, out);
                set(&mut c.degradation.blur_sigma, blur);
                set(&mut c.degradation.noise_sigma, noise);
                if jpeg.is_some() {
                    c.degradation.jpeg_quality = *jpeg;
                }
                set(&mut c.degradation.downsample, downsample);
            }
            Command::TrainRegressor { data, degraded, out, iterations, .. } => {
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, degraded);
                set(&mut c.paths.checkpoints, out);
                set(&mut c.regressor.iterations, iterations);
            }
            Command::TrainDiffusion { data, degraded, out, iterations, .. } => {
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, degraded);
                set(&mut c.paths.checkpoints, out);
                set(&mut c.diffusion.iterations, iterations);
            }
            Command::Restore { checkpoint, input, caption, data, degraded, out, scale, limit, .. } => {
                if checkpoint.is_some() {
                    c.restore.checkpoint = checkpoint.clone();
                }
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, degraded);
                set(&mut c.guidance.scale, scale);
                if limit.is_some() {
                    c.restore.limit = *limit;
                }
                if input.is_some() {
                    c.restore.input = input.clone();
                    c.restore.output = out.clone();
                    if caption.is_some() {
                        c.restore.caption = caption.clone();
                    }
                } else {
                    set(&mut c.paths.restored, out);
                }
            }
            Command::Evaluate { restored, data, degraded, out, .. } => {
                set(&mut c.paths.restored, restored);
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, degraded);
                set(&mut c.paths.evaluation, out);
            }
            Command::Curate { input, out, marks, .. } => {
                set(&mut c.paths.curate_in, input);
                set(&mut c.paths.curate_out, out);
                if marks.is_some() {
                    c.paths.marks = marks.clone();
                }
            }
            Command::SweepS { checkpoint, data, degraded, out, count, .. } => {
                if checkpoint.is_some() {
                    c.restore.checkpoint = checkpoint.clone();
                }
                set(&mut c.paths.data, data);
                set(&mut c.paths.degraded, degraded);
                set(&mut c.paths.sweep, out);
                set(&mut c.sweep.count, count);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::OutOfVocabulary(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => EXIT_MISSING,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => EXIT_NUMERIC,
        Error::OutputDir { .. } => EXIT_UNWRITABLE,
        _ => EXIT_FAILURE,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        EXIT_CONFIG => "config",
        EXIT_MISSING => "missing_artifact",
        EXIT_NUMERIC => "numeric",
        EXIT_UNWRITABLE => "unwritable_output",
        _ => "failure",
    }
}

/// One-line JSON error description.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({"error": error_kind(e), "code": exit_code(e), "message": e.to_string()}).to_string()
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::OutputDir {
        path: path.to_path_buf(),
        source,
    })?;
    let probe = path.join(".write_probe");
    fs::write(&probe, b"").map_err(|source| Error::OutputDir {
        path: path.to_path_buf(),
        source,
    })?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `resolved_<command>.json` into `dir`.
pub fn write_snapshot(dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let path = dir.join(format!("resolved_{command}.json"));
    write_file(&path, serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(path)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<ModelParams> {
    ModelParams::load(path, Some(&cfg.model))
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    out_dir(&cfg.paths.data)?;
    write_snapshot(&cfg.paths.data, "gen", cfg)?;
    let m = generate_dataset(cfg.generate.count, cfg.data_seed(), &cfg.paths.data, cfg.generate.split)?;
    log::info!("wrote {} samples to {}", cfg.generate.count, m.display());
    Ok(())
}

fn cmd_degrade(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.manifest();
    if !manifest.exists() {
        return Err(Error::MissingArtifact(manifest));
    }
    out_dir(&cfg.paths.degraded)?;
    write_snapshot(&cfg.paths.degraded, "degrade", cfg)?;
    degrade_dataset(&manifest, &cfg.degradation, cfg.degradation_seed(), &cfg.paths.degraded)?;
    Ok(())
}

fn cmd_train_regressor(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&cfg.manifest(), &cfg.paths.degraded, Some(Split::Train))?;
    out_dir(&cfg.paths.checkpoints)?;
    write_snapshot(&cfg.paths.checkpoints, "train-regressor", cfg)?;
    let init = ModelParams::init(&cfg.model, cfg.init_seed())?;
    train_regressor(&cfg.train_config("regressor"), &data, init, Some(&cfg.paths.checkpoints))?;
    Ok(())
}

fn cmd_train_diffusion(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg, &cfg.regressor_checkpoint())?;
    let data = Dataset::load(&cfg.manifest(), &cfg.paths.degraded, Some(Split::Train))?;
    out_dir(&cfg.paths.checkpoints)?;
    write_snapshot(&cfg.paths.checkpoints, "train-diffusion", cfg)?;
    let dir = Some(cfg.paths.checkpoints.as_path());
    let params = train_parts(&cfg.train_config("parts"), &data, params, dir)?.params;
    let params = train_codec(&cfg.train_config("codec"), &data, params, dir)?.params;
    train_diffusion(&cfg.train_config("diffusion"), &data, params, &cfg.schedule()?, dir)?;
    Ok(())
}

/// Per-image line of `restore_summary.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreSummary {
    pub id: String,
    pub detected: bool,
    pub part_loss: Option<f64>,
}

pub const RESTORE_SUMMARY: &str = "restore_summary.jsonl";

fn cmd_restore(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg, &cfg.model_checkpoint())?;
    let sched = cfg.schedule()?;
    if let Some(input) = &cfg.restore.input {
        if !input.exists() {
            return Err(Error::MissingArtifact(input.clone()));
        }
        let output = cfg
            .restore
            .output
            .clone()
            .ok_or_else(|| Error::Config("single-image restore needs --out FILE".into()))?;
        let dir = output.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        out_dir(dir)?;
        write_snapshot(dir, "restore", cfg)?;
        let lq = ImageTensor::load_png(input)?;
        let caption = caption_of(cfg.restore.caption.as_deref())?;
        let r = guided_sample(&lq, &caption, &params, &sched, &cfg.guidance_config(0))?;
        r.image.save_png(&output)?;
        write_file(&output.with_extension("trace.jsonl"), trace_jsonl(&r.trace)?)?;
        return Ok(());
    }
    let data = Dataset::load(&cfg.manifest(), &cfg.paths.degraded, Some(Split::Test))?;
    let dir = &cfg.paths.restored;
    out_dir(dir)?;
    write_snapshot(dir, "restore", cfg)?;
    let n = cfg.restore.limit.map_or(data.len(), |l| l.min(data.len()));
    let mut summary = String::new();
    for (i, e) in data.examples.iter().take(n).enumerate() {
        let r = guided_sample(&e.lq, &e.caption, &params, &sched, &cfg.guidance_config(i))?;
        r.image.save_png(&dir.join(format!("{}.png", e.id)))?;
        r.reg.save_png(&dir.join(format!("{}_reg.png", e.id)))?;
        write_file(&dir.join(format!("{}_trace.jsonl", e.id)), trace_jsonl(&r.trace)?)?;
        let line = RestoreSummary {
            id: e.id.clone(),
            detected: r.structure.detected,
            part_loss: r.part_loss(&params, cfg.guidance.variant)?,
        };
        summary.push_str(&serde_json::to_string(&line)?);
        summary.push('\n');
        log::info!("restored {} ({}/{n})", e.id, i + 1);
    }
    write_file(&dir.join(RESTORE_SUMMARY), summary)
}

fn caption_of(text: Option<&str>) -> Result<CaptionRecord> {
    let parsed = parse_caption(text.unwrap_or(""));
    for w in &parsed.warnings {
        log::warn!("caption: {w}");
    }
    Ok(parsed.record)
}

/// Means written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub count: usize,
    pub restored_psnr: f64,
    pub restored_ssim: f64,
    pub degraded_psnr: Option<f64>,
    pub degraded_ssim: Option<f64>,
    pub regression_psnr: Option<f64>,
    pub regression_ssim: Option<f64>,
    pub mean_part_loss: Option<f64>,
}

fn read_restore_summary(dir: &Path) -> Result<Vec<RestoreSummary>> {
    let path = dir.join(RESTORE_SUMMARY);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    fs::read_to_string(&path)
        .map_err(|e| Error::io(&path, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let lines = read_restore_summary(&cfg.paths.restored)?;
    let data_root = &cfg.paths.data;
    let degraded_available = cfg.paths.degraded.join(crate::dataset::DEGRADED_MANIFEST).exists();
    out_dir(&cfg.paths.evaluation)?;
    write_snapshot(&cfg.paths.evaluation, "evaluate", cfg)?;
    let mut restored = MetricReport::default();
    let mut degraded = MetricReport::default();
    let mut regression = MetricReport::default();
    let load = |p: PathBuf| -> Result<ImageTensor> {
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        ImageTensor::load_png(&p)
    };
    for l in &lines {
        let hq = load(data_root.join(format!("{}.png", l.id)))?;
        restored.push(&l.id, &load(cfg.paths.restored.join(format!("{}.png", l.id)))?, &hq)?;
        let reg = cfg.paths.restored.join(format!("{}_reg.png", l.id));
        if reg.exists() {
            regression.push(&l.id, &load(reg)?, &hq)?;
        }
        if degraded_available {
            degraded.push(&l.id, &load(cfg.paths.degraded.join(format!("{}.png", l.id)))?, &hq)?;
        }
    }
    let dir = &cfg.paths.evaluation;
    write_file(&dir.join("metrics.csv"), restored.to_csv())?;
    let opt = |r: &MetricReport| (!r.rows.is_empty()).then(|| (r.mean_psnr(), r.mean_ssim()));
    if !degraded.rows.is_empty() {
        write_file(&dir.join("degraded_metrics.csv"), degraded.to_csv())?;
    }
    if !regression.rows.is_empty() {
        write_file(&dir.join("regression_metrics.csv"), regression.to_csv())?;
    }
    let losses: Vec<f64> = lines.iter().filter_map(|l| l.part_loss).collect();
    let summary = EvaluationSummary {
        count: lines.len(),
        restored_psnr: restored.mean_psnr(),
        restored_ssim: restored.mean_ssim(),
        degraded_psnr: opt(&degraded).map(|v| v.0),
        degraded_ssim: opt(&degraded).map(|v| v.1),
        regression_psnr: opt(&regression).map(|v| v.0),
        regression_ssim: opt(&regression).map(|v| v.1),
        mean_part_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")
}

fn cmd_curate(cfg: &RunConfig) -> Result<()> {
    if !cfg.paths.curate_in.is_dir() {
        return Err(Error::MissingArtifact(cfg.paths.curate_in.clone()));
    }
    out_dir(&cfg.paths.curate_out)?;
    write_snapshot(&cfg.paths.curate_out, "curate", cfg)?;
    let detector = ForegroundDetector {
        threshold: cfg.curation.coverage_threshold,
    };
    let (_, summary) = curate(
        &cfg.paths.curate_in,
        &cfg.paths.curate_out,
        &cfg.curation,
        &detector,
        cfg.paths.marks.as_deref(),
    )?;
    write_file(
        &cfg.paths.curate_out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let params = load_model(cfg, &cfg.model_checkpoint())?;
    let data = Dataset::load(&cfg.manifest(), &cfg.paths.degraded, Some(Split::Test))?;
    out_dir(&cfg.paths.sweep)?;
    write_snapshot(&cfg.paths.sweep, "sweep-s", cfg)?;
    let items: Vec<SweepItem> = data
        .examples
        .iter()
        .take(cfg.sweep.count)
        .map(|e| SweepItem {
            id: e.id.clone(),
            lq: e.lq.clone(),
            hq: e.hq.clone(),
            caption: e.caption.clone(),
        })
        .collect();
    let rows = sweep_scales(&items, &params, &cfg.schedule()?, &cfg.guidance_config(0), &cfg.sweep.scales)?;
    let mut csv = String::from("scale,mean_part_loss,mean_psnr,mean_ssim\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6}", r.scale, r.mean_part_loss, r.mean_psnr, r.mean_ssim);
    }
    write_file(&cfg.paths.sweep.join("sweep.csv"), csv)?;
    let chosen = serde_json::json!({ "scale": calibrated_scale(&rows) });
    write_file(&cfg.paths.sweep.join("calibrated.json"), chosen.to_string() + "\n")
}

/// Runs a parsed command.
pub fn execute(cmd: &Command) -> Result<()> {
    let cfg = cmd.resolve()?;
    match cmd {
        Command::Gen { .. } => cmd_gen(&cfg),
        Command::Degrade { .. } => cmd_degrade(&cfg),
        Command::TrainRegressor { .. } => cmd_train_regressor(&cfg),
        Command::TrainDiffusion { .. } => cmd_train_diffusion(&cfg),
        Command::Restore { .. } => cmd_restore(&cfg),
        Command::Evaluate { .. } => cmd_evaluate(&cfg),
        Command::Curate { .. } => cmd_curate(&cfg),
        Command::SweepS { .. } => cmd_sweep(&cfg),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported as one JSON line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1, "bogus": 2}"#).unwrap();
        let e = RunConfig::load(&p).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        fs::write(&p, r#"{"seed": 1, "diffusion": {"iterations": 5}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.diffusion.iterations, 5);
        assert_eq!(c.diffusion.batch_size, 16);
    }

    #[test]
    fn gen_with_zero_count_writes_an_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let code = run(["body-restore", "gen", "--n", "0", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(fs::read_to_string(out.join(MANIFEST_NAME)).unwrap(), "");
        assert!(out.join("resolved_gen.json").exists());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let missing = run(["body-restore", "restore", "--checkpoint", &format!("{d}/none.safetensors")]);
        assert_eq!(missing, EXIT_MISSING);
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{\"seed\": -1}").unwrap();
        assert_eq!(run(["body-restore", "gen", "--config", bad.to_str().unwrap()]), EXIT_CONFIG);
        let file = dir.path().join("file");
        fs::write(&file, "").unwrap();
        let unwritable = run(["body-restore", "gen", "--n", "0", "--out", &format!("{}/sub", file.display())]);
        assert_eq!(unwritable, EXIT_UNWRITABLE);
        assert_eq!(exit_code(&Error::NonFiniteLoss { iteration: 2 }), EXIT_NUMERIC);
    }
}
