//! Command-line entry point. Exit codes: 0 success, 1 invalid input or
//! configuration, 2 a failed check (gradient suite or ablation gate).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::detector::load_checkpoint;
use crate::gradsuite::MIN_INSTANCES;
use crate::pipeline::{self, Context, PipelineError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pyramidforge", version, about = "Desk-scale twin-head detector with anchor rescue and hierarchy attention")]
pub struct Cli {
    /// `section.key = value` configuration file; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Tile DOTA images and annotations into a patch dataset.
    ParseDota {
        /// Directory holding `images/` and `labelTxt/`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Anchor coverage before and after rescue, by area bucket.
    AssignStats,
    /// Finite-difference checks of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = MIN_INSTANCES)]
        instances: usize,
    },
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Overrides `run.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Baseline, +DEA, +HT and +DEA+HT over several seeds.
    Ablate,
    /// Generate, train and evaluate with the current configuration.
    Smoke,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_text(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<i32, PipelineError> {
    let cfg = load_config(cli)?;
    let out = PathBuf::from(&cfg.run.out_dir);
    let ctx = Context::new(cfg, out, cli.quiet)?;
    match &cli.command {
        Command::GenData => {
            pipeline::gen_data(&ctx)?;
        }
        Command::ParseDota { input } => {
            pipeline::parse_dota(&ctx, input)?;
        }
        Command::AssignStats => {
            pipeline::assign_stats(&ctx)?;
        }
        Command::Gradcheck { instances } => {
            if *instances == 0 {
                return Err(PipelineError::Input("need at least one instance".into()));
            }
            let reports = pipeline::gradcheck(&ctx, *instances)?;
            if reports.iter().any(|r| !r.passed) {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Train => {
            let scenes = pipeline::load_scenes(&ctx.cfg)?;
            pipeline::train_detector(&ctx, &scenes)?;
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| PathBuf::from(&ctx.cfg.run.checkpoint));
            if path.as_os_str().is_empty() {
                return Err(PipelineError::Input("no checkpoint given (--checkpoint or run.checkpoint)".into()));
            }
            let detector = load_checkpoint(&path)?;
            let scenes = pipeline::load_scenes(&ctx.cfg)?;
            pipeline::evaluate_detector(&ctx, &detector, &scenes)?;
        }
        Command::Ablate => {
            if !pipeline::ablate(&ctx)?.passed() {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Smoke => {
            pipeline::smoke(&ctx)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}
