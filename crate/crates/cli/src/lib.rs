//! Command-line front end: `generate`, `evaluate`, `train` and `ablate`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use protoseg::episodes::{AnnotationKind, EpisodeFormat};
use protoseg::fusion::PoolingMode;

pub use config::{Overrides, Profile, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "protoseg",
    version,
    about = "Few-shot segmentation experiments on synthetic episodes",
    after_help = "Exit status: 0 on success, 1 on runtime errors, 2 on configuration errors, \
                  3 when evaluate or ablate wrote results but some episodes failed."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the episodes of the first evaluation run to disk.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Episode encoding: json, base64 or binary.
        #[arg(long, value_parser = parse_format)]
        format: Option<EpisodeFormat>,
    },
    /// Score a threshold net and write metrics.json and episodes.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Threshold net written by `train`.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Train the threshold net; writes net.json, loss_curve.csv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint.json.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate every cell of modes x steps x annotations into ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (0 = all cores); results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Pooling for fusion: smp or dsmp.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PoolingMode>,
    /// Fusion steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Support masks: dense, scribble or bbox.
    #[arg(long, value_parser = parse_annotation)]
    pub annotation: Option<AnnotationKind>,
    /// Episodes per run.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<PoolingMode, String> {
    match s {
        "smp" => Ok(PoolingMode::Smp),
        "dsmp" => Ok(PoolingMode::Dsmp),
        _ => Err(format!("unknown mode `{s}` (expected smp or dsmp)")),
    }
}

fn parse_annotation(s: &str) -> std::result::Result<AnnotationKind, String> {
    s.parse().map_err(|e: protoseg::Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<EpisodeFormat, String> {
    match s {
        "json" => Ok(EpisodeFormat::Json),
        "base64" => Ok(EpisodeFormat::Base64),
        "binary" => Ok(EpisodeFormat::Binary),
        _ => Err(format!("unknown format `{s}` (expected json, base64 or binary)")),
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            profile: self.profile,
            out: self.out.clone(),
            force: self.force,
            threads: self.threads,
            mode: self.mode,
            steps: self.steps,
            annotation: self.annotation,
            episodes: self.episodes,
            runs: self.runs,
            ..Overrides::default()
        }
    }
}

/// Result of a successful command.
#[derive(Debug)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub summary: String,
    pub failed: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.failed > 0 {
            3
        } else {
            0
        }
    }
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    let (common, mut o) = match &cli.command {
        Command::Generate { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Train { common, .. }
        | Command::Ablate { common, .. } => (common, common.overrides()),
    };
    match &cli.command {
        Command::Generate { format, .. } => o.format = *format,
        Command::Evaluate { net, .. } | Command::Ablate { net, .. } => o.net = net.clone(),
        Command::Train { iterations, .. } => o.iterations = *iterations,
    }
    // validated in full before any work starts
    let cfg = RunConfig::load(common.config.as_deref(), &o)?;
    let product = match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg)?,
        Command::Evaluate { .. } => commands::evaluate_cmd(&cfg)?,
        Command::Train { resume, .. } => commands::train(&cfg, resume.as_deref())?,
        Command::Ablate { .. } => commands::ablate(&cfg)?,
    };
    let written = product.outputs.commit(&cfg.output.dir, cfg.output.force)?;
    Ok(Outcome {
        written,
        summary: product.summary,
        failed: product.failed,
    })
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute(cli)
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
struct BookCli;
