//! Command-line harness wiring corpus generation, teacher training,
//! distillation, ablation sweeps and analysis into reproducible runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod runcfg;

#[derive(Debug)]
pub struct CliError {
    pub usage: bool,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            usage: true,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError {
            usage: false,
            msg: msg.into(),
        }
    }

    pub fn usage_from(e: impl std::fmt::Display) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<maskdistill_core::CoreError> for CliError {
    fn from(e: maskdistill_core::CoreError) -> Self {
        CliError::runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "maskdistill", version, about = "Salient reasoning-prefix masking distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Line-oriented `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $MASKDISTILL_OUT_ROOT or ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// Extra overrides as key=value (repeatable, highest precedence).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic fact-lookup corpus (JSONL plus vocab sidecar).
    GenCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        hops: u8,
        #[arg(long, default_value_t = 6)]
        facts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised next-token training of the teacher on gold traces.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_name: String,
        /// Skip the held-out accuracy evaluation after training.
        #[arg(long)]
        no_eval: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Distill a fresh student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        run_name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Self-distillation: the model serves as its own (detached) teacher.
    SelfDistill {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint of the model to self-distill.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        run_name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of distillation cells and emit a comparison table.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Optional pre-trained teacher; otherwise one is trained per seed.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        run_name: String,
        /// Comma-separated mask kinds.
        #[arg(long, default_value = "salient,region_visual,region_question")]
        masks: String,
        /// Comma-separated selection strategies.
        #[arg(long, default_value = "high")]
        strategies: String,
        /// Comma-separated threshold modes.
        #[arg(long, default_value = "cumulative")]
        threshold_modes: String,
        /// Comma-separated rho ranges as min:max.
        #[arg(long, default_value = "0.3:0.5")]
        rho_ranges: String,
        /// Comma-separated seeds, one full run per seed per cell.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[command(flatten)]
        common: Common,
    },
    /// Compute analysis CSVs from trained checkpoints.
    Analyze {
        /// One of: visual-curve, kl-decay, masked-distance, visual-map,
        /// accuracy, mask-dump, all (= the four analysis CSVs).
        #[arg(long)]
        what: String,
        #[arg(long)]
        corpus: PathBuf,
        /// Model under analysis (student or teacher checkpoint).
        #[arg(long)]
        model: PathBuf,
        /// Teacher checkpoint; required for kl-decay, masked-distance and
        /// mask-dump.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Cap on evaluation samples used per analysis.
        #[arg(long, default_value_t = 500)]
        limit: usize,
        /// Eval-split sample used for visual-map and mask-dump.
        #[arg(long, default_value_t = 0)]
        sample_index: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match commands::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(if e.usage { 2 } else { 1 })
        }
    }
}
