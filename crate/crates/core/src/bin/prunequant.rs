use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunequant::io::to_sorted_json;
use prunequant::pipeline::{compare_modes, export_pareto, run_pipeline_until, PipelineConfig, Stage};
use prunequant::{Error, Result};

#[derive(Parser)]
#[command(name = "prunequant", version, about = "Prune, quantize and recover small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip stages already completed for the same config.
    #[arg(long, global = true)]
    resume: bool,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model.
    Train(#[command(flatten)] Common),
    /// Run through pruning of coupled channel groups.
    Prune(#[command(flatten)] Common),
    /// Run through mutual-information bit allocation.
    Allocate(#[command(flatten)] Common),
    /// Run through Bayesian refinement of the allocation.
    Optimize(#[command(flatten)] Common),
    /// Run through fine-tuning of the final adapted model.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Use this bit configuration (e.g. `8,4,4,4`) instead of the search's best.
        #[arg(long)]
        bits: Option<String>,
    },
    /// Run every stage.
    Pipeline(#[command(flatten)] Common),
    /// Compare uniform, MI-allocated and search-refined precision over seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the root seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write a trial history as CSV with a Pareto-front column.
    ExportPareto {
        history: PathBuf,
        /// CSV path; defaults to the history path with a `.csv` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common, extra: &[String]) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(c.set.iter().chain(extra).map(String::as_str))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn stage_run(c: &Common, until: Stage, extra: &[String]) -> Result<String> {
    let cfg = load_config(c, extra)?;
    let outcome = run_pipeline_until(&cfg, until, c.resume)?;
    to_sorted_json(&outcome.manifest)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(c) => stage_run(&c, Stage::Train, &[]),
        Command::Prune(c) => stage_run(&c, Stage::Prune, &[]),
        Command::Allocate(c) => stage_run(&c, Stage::Allocate, &[]),
        Command::Optimize(c) => stage_run(&c, Stage::Optimize, &[]),
        Command::Recover { common, bits } => {
            let extra: Vec<String> = bits.into_iter().map(|b| format!("recover.bits={b}")).collect();
            stage_run(&common, Stage::Recover, &extra)
        }
        Command::Pipeline(c) => stage_run(&c, Stage::Recover, &[]),
        Command::Compare { common, seeds } => {
            let cfg = load_config(&common, &[])?;
            let list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            to_sorted_json(&compare_modes(&cfg, &list)?)
        }
        Command::ExportPareto { history, out } => {
            let out = out.unwrap_or_else(|| history.with_extension("csv"));
            let n = export_pareto(&history, &out)?;
            Ok(format!("{n} trials written to {}\n", out.display()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
