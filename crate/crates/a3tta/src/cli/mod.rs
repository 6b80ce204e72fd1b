//! Command-line interface of the `a3tta` binary.
//!
//! Five subcommands cover the pipeline: `gen-data`, `pretrain`, `adapt`,
//! `continual`, and `report`. Every command reads an optional TOML settings
//! file, applies command-line overrides on top, writes the fully resolved
//! settings into its output directory, and only then starts computing, so
//! any finished run can be reproduced from its own artifacts.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures at runtime.

mod commands;

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::data::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::segmodel::{ArchConfig, BnMode, PretrainConfig};

/// When set, relative `--out` paths are created under this directory.
pub const OUT_ROOT_ENV: &str = "A3TTA_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "a3tta",
    version,
    about = "Anchor-guided test-time adaptation for image segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: source splits plus shifted targets.
    GenData(GenDataArgs),
    /// Train the source model with the Dice loss; keep the best checkpoint.
    Pretrain(PretrainArgs),
    /// Run one adaptation pass per target domain with the chosen method.
    Adapt(AdaptArgs),
    /// Adapt across an ordered domain sequence for several rounds.
    Continual(ContinualArgs),
    /// Merge finished run directories into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Benchmark output root.
    #[arg(long)]
    out: PathBuf,
    /// TOML settings file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Source training images.
    #[arg(long)]
    n_train: Option<usize>,
    /// Source validation images.
    #[arg(long)]
    n_val: Option<usize>,
    /// Images per target domain.
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Benchmark root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML settings file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bottleneck dropout rate; enables the mc_dropout filter downstream.
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Benchmark root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Source checkpoint from pretrain.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML settings file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodKind>,
    /// Target domain to adapt to; repeatable, defaults to every benchmark
    /// target in order.
    #[arg(long = "domain", value_name = "NAME")]
    domains: Vec<String>,
    /// Learning rate of the tent_like baseline.
    #[arg(long)]
    tent_learning_rate: Option<f64>,
    /// Teacher retention of the fixed_mt baseline.
    #[arg(long)]
    fixed_mt_alpha: Option<f64>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct ContinualArgs {
    /// Benchmark root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Source checkpoint from pretrain.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML settings file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Passes over the whole domain sequence.
    #[arg(long)]
    rounds: Option<usize>,
    /// Domain visit order; repeatable, defaults to every benchmark target.
    #[arg(long = "domain", value_name = "NAME")]
    domains: Vec<String>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Finished run directories to merge.
    #[arg(required = true, value_name = "RUN_DIR")]
    runs: Vec<PathBuf>,
}

/// Adaptation-engine overrides shared by `adapt` and `continual`.
#[derive(Args)]
struct EngineArgs {
    /// Anchor bank capacity.
    #[arg(long)]
    bank_capacity: Option<usize>,
    /// Boundary-entropy loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Teacher-consistency loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stabilizer in the anchor standardization denominator.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Bank admission scoring rule.
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    /// Stochastic passes for the mc_dropout filter.
    #[arg(long)]
    mc_passes: Option<usize>,
    /// Teacher update schedule.
    #[arg(long, value_enum)]
    ema: Option<EmaArg>,
    /// Teacher retention when --ema fixed.
    #[arg(long)]
    ema_alpha: Option<f64>,
    /// Statistics the teacher normalizes with.
    #[arg(long, value_enum)]
    teacher_bn: Option<BnArg>,
    /// Re-encode banked images with the current student each batch.
    #[arg(long)]
    refresh_bank_features: Option<bool>,
    /// Restore source state before each domain in continual runs.
    #[arg(long)]
    reset_between_domains: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EngineArgs {
    fn apply(&self, c: &mut AdaptationConfig) {
        if let Some(v) = self.bank_capacity {
            c.bank_capacity = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.filter {
            c.filter_mode = v.into();
        }
        if let Some(v) = self.mc_passes {
            c.mc_passes = v;
        }
        if let Some(v) = self.ema {
            c.ema_mode = v.into();
        }
        if let Some(v) = self.ema_alpha {
            c.ema_alpha = v;
        }
        if let Some(v) = self.teacher_bn {
            c.teacher_bn_mode = v.into();
        }
        if let Some(v) = self.refresh_bank_features {
            c.refresh_bank_features = v;
        }
        if let Some(v) = self.reset_between_domains {
            c.reset_between_domains = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }
}

/// Adaptation method selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodKind {
    A3tta,
    SourceOnly,
    PtbnLike,
    TentLike,
    FixedMt,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::A3tta => "a3tta",
            MethodKind::SourceOnly => "source_only",
            MethodKind::PtbnLike => "ptbn_like",
            MethodKind::TentLike => "tent_like",
            MethodKind::FixedMt => "fixed_mt",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FilterArg {
    Ccd,
    Entropy,
    McDropout,
}

impl From<FilterArg> for crate::adapt::FilterMode {
    fn from(v: FilterArg) -> Self {
        match v {
            FilterArg::Ccd => Self::Ccd,
            FilterArg::Entropy => Self::Entropy,
            FilterArg::McDropout => Self::McDropout,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum EmaArg {
    Adaptive,
    Fixed,
}

impl From<EmaArg> for crate::adapt::EmaMode {
    fn from(v: EmaArg) -> Self {
        match v {
            EmaArg::Adaptive => Self::Adaptive,
            EmaArg::Fixed => Self::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum BnArg {
    Batch,
    Running,
}

impl From<BnArg> for BnMode {
    fn from(v: BnArg) -> Self {
        match v {
            BnArg::Batch => Self::Batch,
            BnArg::Running => Self::Running,
        }
    }
}

/// Resolved settings of an `adapt` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSettings {
    pub method: MethodKind,
    /// Empty means every benchmark target, in configuration order.
    pub domains: Vec<String>,
    pub tent_learning_rate: f64,
    pub fixed_mt_alpha: f64,
    pub engine: AdaptationConfig,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self {
            method: MethodKind::A3tta,
            domains: Vec::new(),
            tent_learning_rate: 1e-3,
            fixed_mt_alpha: 0.99,
            engine: AdaptationConfig::default(),
        }
    }
}

/// Resolved settings of a `continual` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSettings {
    pub rounds: usize,
    pub domains: Vec<String>,
    pub engine: AdaptationConfig,
}

impl Default for ContinualSettings {
    fn default() -> Self {
        Self {
            rounds: 2,
            domains: Vec::new(),
            engine: AdaptationConfig::default(),
        }
    }
}

/// Resolved settings of a `pretrain` run. `arch` is filled from the
/// benchmark task when absent, then written back resolved.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub pretrain: PretrainConfig,
    pub arch: Option<ArchConfig>,
}

/// Reads a TOML settings file, or the type's defaults when no file is given.
pub fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Serializes the resolved settings into `dir/resolved_config.toml`.
pub fn write_resolved_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let path = dir.join(crate::report::RESOLVED_CONFIG_FILE);
    let text = toml::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn join_out_root(out: &Path, root: Option<&OsStr>) -> PathBuf {
    match root {
        Some(r) if !r.is_empty() && out.is_relative() => PathBuf::from(r).join(out),
        _ => out.to_path_buf(),
    }
}

/// Applies [`OUT_ROOT_ENV`] to a relative output path.
pub fn resolve_out_dir(out: &Path) -> PathBuf {
    join_out_root(out, std::env::var_os(OUT_ROOT_ENV).as_deref())
}

/// Validates the requested domain list against the benchmark; an empty
/// request selects every target in configuration order.
pub fn resolve_domains(requested: &[String], bench: &BenchmarkConfig) -> Result<Vec<String>> {
    let available: Vec<&str> = bench.targets.iter().map(|t| t.name.as_str()).collect();
    if requested.is_empty() {
        return Ok(available.iter().map(|s| s.to_string()).collect());
    }
    for name in requested {
        if !available.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown target domain {name:?}; benchmark provides {available:?}"
            )));
        }
    }
    Ok(requested.to_vec())
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; those print to stdout and
            // exit cleanly.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::Adapt(args) => commands::adapt(&args),
        Command::Continual(args) => commands::continual(&args),
        Command::Report(args) => commands::report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}
