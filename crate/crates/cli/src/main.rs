//! `pillarkit`: featurize point clouds, train toy models, run the property
//! suites and benchmarks.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 failed check,
//! 5 training divergence.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pillarkit::{DescriptorKind, GridMode};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "pillarkit",
    version,
    about = "Grid feature extraction with sorted weighted pooling"
)]
struct Cli {
    /// JSON config merged over the defaults; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    descriptor: Option<KindArg>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grid a KITTI .bin cloud, run the descriptor and write the feature map.
    Featurize { input: PathBuf },
    /// Train a descriptor and linear head on the toy task.
    TrainToy {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    CheckGrad,
    /// Run the invariance, sorting, mean and gradient suites.
    #[command(alias = "check")]
    PropTest {
        /// Skip the per-channel sort, to show the suites catch it.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Time weighted, max and mean descriptors.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Pillar,
    Voxel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Weighted,
    Max,
    Mean,
}

/// `PILLARKIT_THREADS`, if set, sizes the worker pool.
fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("PILLARKIT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "PILLARKIT_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let threads = threads_from_env()?;
    if let Some(n) = threads {
        pillarkit::par::init_threads(n);
    }
    let flags = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            ModeArg::Pillar => GridMode::Pillar,
            ModeArg::Voxel => GridMode::Voxel,
        }),
        descriptor: cli.descriptor.map(|k| match k {
            KindArg::Weighted => DescriptorKind::Weighted,
            KindArg::Max => DescriptorKind::Max,
            KindArg::Mean => DescriptorKind::Mean,
        }),
        out: cli.out,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::Featurize { input } => commands::featurize(&cfg, &input),
        Command::TrainToy { resume, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
                cfg.train
                    .validate()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            commands::train_toy(&cfg, resume.as_deref())
        }
        Command::CheckGrad => commands::check_grad(&cfg),
        Command::PropTest { inject_fault } => commands::prop_test(&cfg, inject_fault),
        Command::Bench => commands::bench(&cfg, threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
