//! Grid execution and result files.
//!
//! `run_grid` writes `results.csv` (one row per scenario, policy and seed),
//! a `results.json` sidecar with the resolved scenarios and per-run
//! diagnostics, and optionally one per-slot trace CSV per run.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::sim::{run_simulation, warm_cache, Metrics, RunContext, RunMetadata, Scenario, SlotRecord};

pub const CSV_COLUMNS: [&str; 12] = [
    "scenario_id",
    "policy",
    "seed",
    "regime",
    "n_slots",
    "avg_cost",
    "avg_energy",
    "avg_holding",
    "avg_drops",
    "avg_throughput",
    "wall_time_s",
    "config_hash",
];

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("building worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    pub out_dir: PathBuf,
    pub trace: bool,
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub scenario_id: String,
    pub policy: String,
    pub seed: u64,
    pub regime: String,
    pub n_slots: u64,
    pub config_hash: String,
    pub wall_time_s: f64,
    pub metrics: Option<Metrics>,
    pub metadata: Option<RunMetadata>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
struct Sidecar<'a> {
    software: &'static str,
    version: &'static str,
    scenarios: Vec<ScenarioEcho<'a>>,
    runs: Vec<SidecarRun<'a>>,
}

#[derive(Clone, Debug, Serialize)]
struct ScenarioEcho<'a> {
    config_hash: String,
    scenario: &'a Scenario,
}

#[derive(Clone, Debug, Serialize)]
struct SidecarRun<'a> {
    scenario_id: &'a str,
    policy: &'a str,
    seed: u64,
    config_hash: &'a str,
    metrics: &'a Option<Metrics>,
    index: Option<&'a crate::sim::IndexDiagnostics>,
    error: &'a Option<String>,
}

#[derive(Debug)]
pub struct GridReport {
    pub records: Vec<RunRecord>,
    pub csv_path: PathBuf,
    pub sidecar_path: PathBuf,
}

impl GridReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

fn run_one(scenario: &Scenario, seed: u64, ctx: &RunContext) -> (RunRecord, Option<Vec<SlotRecord>>) {
    let start = Instant::now();
    let result = run_simulation(scenario, seed, ctx);
    let wall_time_s = start.elapsed().as_secs_f64();
    let mut record = RunRecord {
        scenario_id: scenario.id.clone(),
        policy: scenario.policy.kind.to_string(),
        seed,
        regime: scenario.regime.to_string(),
        n_slots: scenario.n_slots,
        config_hash: scenario.config_hash(),
        wall_time_s,
        metrics: None,
        metadata: None,
        error: None,
    };
    match result {
        Ok(out) => {
            record.metrics = Some(out.metrics);
            record.metadata = Some(out.metadata);
            (record, out.trace)
        }
        Err(e) => {
            record.error = Some(e.to_string());
            (record, None)
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// CSV fields for one record, in [`CSV_COLUMNS`] order. Failed runs leave
/// the metric fields empty.
pub fn csv_fields(r: &RunRecord) -> Vec<String> {
    let m = |f: fn(&Metrics) -> f64| r.metrics.as_ref().map(|x| fmt_f64(f(x))).unwrap_or_default();
    vec![
        r.scenario_id.clone(),
        r.policy.clone(),
        r.seed.to_string(),
        r.regime.clone(),
        r.n_slots.to_string(),
        m(|x| x.avg_cost),
        m(|x| x.avg_energy),
        m(|x| x.avg_holding),
        m(|x| x.avg_drops),
        m(|x| x.avg_throughput),
        format!("{:.6}", r.wall_time_s),
        r.config_hash.clone(),
    ]
}

fn write_trace(path: &Path, trace: &[SlotRecord]) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "slot",
        "active",
        "backlog",
        "arrived",
        "served",
        "dropped",
        "energy",
        "holding",
        "total",
    ])?;
    for rec in trace {
        let active = rec
            .active
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let sum = |v: &[u32]| v.iter().map(|&x| u64::from(x)).sum::<u64>().to_string();
        w.write_record([
            rec.slot.to_string(),
            active,
            sum(&rec.before),
            sum(&rec.arrived),
            sum(&rec.served),
            sum(&rec.dropped),
            fmt_f64(rec.cost.energy),
            fmt_f64(rec.cost.holding),
            fmt_f64(rec.cost.total),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn trace_name(r: &RunRecord) -> String {
    let safe = |s: &str| s.replace(['/', ':', '\\'], "_");
    format!("{}__{}__seed{}.csv", safe(&r.scenario_id), safe(&r.policy), r.seed)
}

/// Runs every (scenario, seed) pair on a bounded worker pool and writes the
/// result files. Rows are sorted by scenario id, policy and seed, so output
/// does not depend on scheduling.
pub fn run_grid(
    scenarios: &[Scenario],
    opts: &GridOptions,
    ctx: RunContext,
) -> Result<GridReport, RunnerError> {
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let ctx = RunContext {
        trace: opts.trace,
        cache: crate::sim::IndexCache::new(opts.cache_dir.clone()),
        ..ctx
    };
    let jobs: Vec<(&Scenario, u64)> = scenarios
        .iter()
        .flat_map(|s| s.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| RunnerError::Pool(e.to_string()))?;
    let mut results: Vec<(RunRecord, Option<Vec<SlotRecord>>)> = pool.install(|| {
        // Build each stationary table once, one at a time (each build is
        // itself parallel), before runs fan out. Errors resurface per run.
        for &(s, seed) in &jobs {
            let _ = warm_cache(s, seed, &ctx);
        }
        jobs.par_iter()
            .map(|&(s, seed)| run_one(s, seed, &ctx))
            .collect()
    });
    results.sort_by(|a, b| {
        (&a.0.scenario_id, &a.0.policy, a.0.seed).cmp(&(&b.0.scenario_id, &b.0.policy, b.0.seed))
    });

    if opts.trace {
        let dir = opts.out_dir.join("traces");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (rec, trace) in &results {
            if let Some(t) = trace {
                write_trace(&dir.join(trace_name(rec)), t)?;
            }
        }
    }
    let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();

    let csv_path = opts.out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in &records {
        w.write_record(csv_fields(r))?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let sidecar = Sidecar {
        software: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        scenarios: scenarios
            .iter()
            .map(|s| ScenarioEcho {
                config_hash: s.config_hash(),
                scenario: s,
            })
            .collect(),
        runs: records
            .iter()
            .map(|r| SidecarRun {
                scenario_id: &r.scenario_id,
                policy: &r.policy,
                seed: r.seed,
                config_hash: &r.config_hash,
                metrics: &r.metrics,
                index: r.metadata.as_ref().and_then(|m| m.index.as_ref()),
                error: &r.error,
            })
            .collect(),
    };
    let sidecar_path = opts.out_dir.join("results.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, text).map_err(io_err(&sidecar_path))?;

    Ok(GridReport {
        records,
        csv_path,
        sidecar_path,
    })
}
