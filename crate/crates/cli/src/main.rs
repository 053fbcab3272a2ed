//! `neurosim`: run the keyword-spotting and adaptive-control workloads on
//! the PE model and sweep the analytical cost models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "neurosim", version, about = "Neuromorphic PE simulator: MAC-array timing, keyword spotting, adaptive control")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "NEUROSIM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Keyword-spotting network.
    #[command(subcommand)]
    Kws(KwsCommand),
    /// Adaptive arm controller.
    #[command(subcommand)]
    Adaptive(AdaptiveCommand),
    /// Analytical cost model.
    #[command(subcommand)]
    Cost(CostCommand),
    /// Fit the matmul polynomial to MAC-array structural cycles.
    #[command(long_about = "Fit constant + n·N + nd·N·D + d·D to MAC-array structural cycle counts \
over an N×D grid and report it next to the silicon-fitted coefficients.\n\n\
JSON fields: structural_fit, silicon_fit, samples, violations")]
    Fit(FitArgs),
    /// Normal and aging cases with both controllers, summarized.
    #[command(long_about = "Run PD-only and adaptive control on the normal and aging arm and \
summarize tracking errors.\n\n\
JSON fields: seed, trials, trial_seconds, cases, aging_ratio, normal_ratio")]
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
enum KwsCommand {
    /// Run one 10-frame inference window.
    #[command(long_about = "Run one 10-frame inference of the 390-256-256-29 network over three PEs. \
Without --weights/--frames a seeded random network and random frames are used.\n\n\
JSON fields: seed, placement, per_pe, per_pe_cycles, step_cycles_worst, step_period_cycles, \
inferences_per_sec_modeled, energy_uj_modeled, logits")]
    Run(KwsRunArgs),
    /// Write a seeded random network bundle and frame file.
    Gen(KwsGenArgs),
}

#[derive(Debug, Args)]
struct KwsRunArgs {
    /// KWS1 network bundle.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// QM01 frames, 390 rows × 10 columns.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// SRAM bytes per PE for network data.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct KwsGenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weights_out: PathBuf,
    #[arg(long)]
    frames_out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AdaptiveCommand {
    /// Closed-loop trials on the simulated arm.
    #[command(long_about = "Run K back-to-back trials; decoders persist between trials.\n\n\
CSV columns: step, theta, target, u_pd, u_adapt, spike_count")]
    Run(AdaptiveRunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaseArg {
    Normal,
    Aging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Pd,
    Adaptive,
}

#[derive(Debug, Args)]
struct AdaptiveRunArgs {
    #[arg(long, value_enum, default_value = "normal")]
    case: CaseArg,
    #[arg(long, value_enum, default_value = "adaptive")]
    controller: ControllerArg,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "trial.csv")]
    out: PathBuf,
    /// Also write encoder (QM01) + decoder (F16D) state after the run.
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CostCommand {
    /// Evaluate cycles, bytes and energy over a dimension grid.
    #[command(long_about = "Evaluate the cost model over a grid given as JSON \
{\"n\": [..], \"d_in\": [..], \"d_out\": [..], \"p\": [..]} or the word 'default'. \
For kws, d_in is the layer input count, d_out is reported as n and p as 1.\n\n\
CSV columns: n, d_in, d_out, p, cycles_total, bytes_total, feasible, energy_uj")]
    Sweep(SweepArgs),
    /// Maximum output dimensions that fit in SRAM per (n, d_in).
    #[command(long_about = "Invert the adaptive-control memory model for the largest d_out that \
fits the SRAM budget.\n\n\
CSV columns: n, d_in, max_d_out, feasible")]
    Map(MapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchArg {
    Kws,
    Adaptive,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    bench: BenchArg,
    /// Grid JSON file, or `default`.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "grid.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MapArgs {
    /// Neuron counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_MAP_N.to_vec())]
    n: Vec<usize>,
    /// Input dimensions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_MAP_D_IN.to_vec())]
    d_in: Vec<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "map.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "demo.json")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;

    match cli.command {
        Command::Kws(KwsCommand::Run(a)) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(b) = a.budget {
                cfg.budget_bytes = b;
            }
            cfg.validate()?;
            commands::kws_run(&cfg, a.weights.as_deref(), a.frames.as_deref(), &a.out)
        }
        Command::Kws(KwsCommand::Gen(a)) => {
            commands::kws_gen(a.seed.unwrap_or(cfg.seed), &a.weights_out, &a.frames_out)
        }
        Command::Adaptive(AdaptiveCommand::Run(a)) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            commands::adaptive_run(
                &cfg,
                match a.case {
                    CaseArg::Normal => neurosim_core::plant::PlantCase::Normal,
                    CaseArg::Aging => neurosim_core::plant::PlantCase::Aging,
                },
                match a.controller {
                    ControllerArg::Pd => neurosim_core::plant::ControllerKind::Pd,
                    ControllerArg::Adaptive => neurosim_core::plant::ControllerKind::Adaptive,
                },
                a.trials,
                &a.out,
                a.snapshot_out.as_deref(),
            )
        }
        Command::Cost(CostCommand::Sweep(a)) => {
            if let Some(b) = a.budget {
                cfg.budget_bytes = b;
            }
            cfg.validate()?;
            let bench = match a.bench {
                BenchArg::Kws => commands::Bench::Kws,
                BenchArg::Adaptive => commands::Bench::Adaptive,
            };
            commands::cost_sweep(&cfg, bench, &a.grid, &a.out)
        }
        Command::Cost(CostCommand::Map(a)) => {
            if let Some(b) = a.budget {
                cfg.budget_bytes = b;
            }
            cfg.validate()?;
            commands::cost_map(&cfg, &a.n, &a.d_in, &a.out)
        }
        Command::Fit(a) => commands::fit(&cfg, &a.out),
        Command::Demo(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            commands::demo(&cfg, a.trials, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neurosim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
