use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use whittle_sched::config::{read_config, resolve, ConfigFile, Overrides};
use whittle_sched::runner::{run_grid, GridOptions};
use whittle_sched::{PolicyKind, RunContext};

/// Run a grid of scheduling simulations and write results.csv / results.json.
#[derive(Debug, Parser)]
#[command(name = "whittle-sim", version)]
struct Args {
    /// Scenario config (JSON). Without it every default is used.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,

    /// Seed to run; repeat for several. Replaces the config's seeds.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,

    /// Number of simulated slots.
    #[arg(long, value_name = "N")]
    slots: Option<u64>,

    /// Policy to run; repeat for several. Replaces the config's policies.
    #[arg(long = "policy", value_name = "NAME")]
    policies: Vec<PolicyKind>,

    /// Number of users (geometric graphs only).
    #[arg(long, value_name = "L")]
    users: Option<usize>,

    /// Interference distance threshold.
    #[arg(long, value_name = "D")]
    d: Option<f64>,

    /// Index iteration step size.
    #[arg(long)]
    gamma: Option<f64>,

    /// Iterations for stationary index tables.
    #[arg(long, value_name = "N")]
    n_iter: Option<usize>,

    /// Lyapunov energy weight.
    #[arg(long)]
    theta: Option<f64>,

    /// Write a per-slot trace CSV per run.
    #[arg(long)]
    trace: bool,

    /// Directory for cached stationary index tables.
    #[arg(long, value_name = "PATH", conflicts_with = "no_cache")]
    cache_dir: Option<PathBuf>,

    /// Do not read or write the on-disk index cache.
    #[arg(long)]
    no_cache: bool,

    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,

    /// Print the fully resolved scenarios as JSON and exit.
    #[arg(long)]
    resolve_only: bool,
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<ExitCode> {
    let overrides = Overrides {
        seeds: args.seeds.clone(),
        slots: args.slots,
        policies: args.policies.clone(),
        users: args.users,
        d: args.d,
        gamma: args.gamma,
        n_iter: args.n_iter,
        theta: args.theta,
    };
    let (mut cfg, base_dir) = match &args.config {
        Some(path) => (
            read_config(path)?,
            path.parent().map(|p| p.to_path_buf()),
        ),
        None => (ConfigFile::default(), None),
    };
    overrides.apply(&mut cfg);
    let scenarios = resolve(&cfg, base_dir.as_deref())?;

    if args.resolve_only {
        println!("{}", serde_json::to_string_pretty(&scenarios)?);
        return Ok(ExitCode::SUCCESS);
    }

    let cache_dir = if args.no_cache {
        None
    } else {
        Some(args.cache_dir.unwrap_or_else(|| args.out.join("index_cache")))
    };
    let opts = GridOptions {
        out_dir: args.out,
        trace: args.trace,
        cache_dir,
        jobs: args.jobs,
    };
    let runs: usize = scenarios.iter().map(|s| s.seeds.len()).sum();
    eprintln!("running {} scenarios, {runs} runs", scenarios.len());
    let report = run_grid(&scenarios, &opts, RunContext::default())
        .with_context(|| format!("writing results to {}", opts.out_dir.display()))?;

    for r in report.records.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "failed: {} {} seed {}: {}",
            r.scenario_id,
            r.policy,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    eprintln!(
        "wrote {} and {}",
        report.csv_path.display(),
        report.sidecar_path.display()
    );
    Ok(if report.failures() > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}
