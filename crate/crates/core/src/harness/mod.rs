//! Experiment orchestration: seeded grids of runs, CSV emission, the
//! aggregate mean curves and their verification.

mod config;
mod output;

pub use config::{seed_derivation, RunConfig, RunSeeds};
pub use output::{
    aggregate, aggregate_csv, format_sig, is_logged, parse_aggregate_csv, parse_run_csv, run_csv,
    AggregateRow, ResultRow, RunLabel, AGGREGATE_HEADER, DENSE_LOG_LIMIT, RUN_HEADER, SPARSE_STRIDE,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{build_policy, generate_scenario, run_policy, MarketScenario, RegretRecord};
use crate::error::{Result, TjapError};
use crate::policy::AlgorithmKind;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RUNS_DIR: &str = "runs";

/// Environment variable that overrides every other thread setting.
pub const THREADS_ENV: &str = "TJAP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one (algorithm, H, repetition) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub algorithm: String,
    pub h: usize,
    pub repetition: usize,
    pub seeds: RunSeeds,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Run file relative to the output directory.
    pub file: Option<String>,
    pub final_cum_regret: Option<f64>,
    pub forced_rounds: Option<usize>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub aggregate: String,
    pub cells: Vec<CellReport>,
}

impl Manifest {
    pub fn failed_cells(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.status == CellStatus::Failed)
            .count()
    }
}

pub fn version_string() -> String {
    format!("tjap-core v{}", env!("CARGO_PKG_VERSION"))
}

/// Thread count: the environment override, then the CLI flag, then the
/// config, then every available core.
pub fn resolve_threads(cli: Option<usize>, config: &RunConfig) -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        return match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(TjapError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))),
        };
    }
    if cli == Some(0) {
        return Err(TjapError::Config("--parallel must be at least 1".into()));
    }
    Ok(cli
        .or(config.parallelism)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

/// Scenario of one repetition, generated with the largest source count so
/// that smaller counts see a prefix of the same source markets.
pub fn scenario_for_repetition(config: &RunConfig, repetition: usize) -> Result<MarketScenario> {
    let seeds = seed_derivation(config.master_seed, AlgorithmKind::Tjap, 0, repetition);
    generate_scenario(&config.scenario_config(config.max_sources()), seeds.scenario)
}

/// Simulates one cell against an already generated repetition scenario.
pub fn run_cell(
    config: &RunConfig,
    scenario: &MarketScenario,
    algorithm: AlgorithmKind,
    h: usize,
    repetition: usize,
) -> Result<Vec<RegretRecord>> {
    let seeds = seed_derivation(config.master_seed, algorithm, h, repetition);
    let scenario = scenario.restrict_sources(h)?;
    let mut policy = build_policy(algorithm, &scenario, &config.policy, seeds.policy)?;
    run_policy(&scenario, policy.as_mut(), config.horizon, &config.policy)
}

pub fn run_file_name(algorithm: AlgorithmKind, h: usize, repetition: usize) -> String {
    format!("{RUNS_DIR}/{}_H{h}_rep{repetition:03}.csv", algorithm.name())
}

/// Runs the whole grid on `threads` workers and writes per-run CSVs, the
/// aggregate CSV and the manifest under `out_dir`. A failing cell is
/// recorded in the manifest and left out of the aggregate.
pub fn run_experiment(
    config: &RunConfig,
    out_dir: &Path,
    threads: usize,
    progress: Option<&(dyn Fn(&CellReport) + Sync)>,
) -> Result<Manifest> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out_dir.join(RUNS_DIR))?;
    let algorithms = config.algorithm_kinds()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TjapError::Config(format!("cannot start {threads} workers: {e}")))?;

    let mut cells = Vec::new();
    for &alg in &algorithms {
        for &h in &config.sources {
            for rep in 0..config.repetitions {
                cells.push((alg, h, rep));
            }
        }
    }

    let outcomes: Vec<(CellReport, Option<Vec<ResultRow>>)> = pool.install(|| {
        let scenarios: Vec<Result<MarketScenario>> = (0..config.repetitions)
            .into_par_iter()
            .map(|rep| scenario_for_repetition(config, rep))
            .collect();
        cells
            .par_iter()
            .map(|&(alg, h, rep)| {
                let outcome = execute_cell(config, &scenarios[rep], out_dir, alg, h, rep);
                if let Some(cb) = progress {
                    cb(&outcome.0);
                }
                outcome
            })
            .collect()
    });

    let mut reports = Vec::with_capacity(outcomes.len());
    let mut runs = Vec::new();
    for (report, rows) in outcomes {
        reports.push(report);
        runs.extend(rows);
    }
    let agg = aggregate(&runs)?;
    fs::write(out_dir.join(AGGREGATE_FILE), aggregate_csv(&agg))?;

    let manifest = Manifest {
        version: version_string(),
        config: config.clone(),
        threads,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        aggregate: AGGREGATE_FILE.into(),
        cells: reports,
    };
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn execute_cell(
    config: &RunConfig,
    scenario: &Result<MarketScenario>,
    out_dir: &Path,
    algorithm: AlgorithmKind,
    h: usize,
    repetition: usize,
) -> (CellReport, Option<Vec<ResultRow>>) {
    let started = Instant::now();
    let seeds = seed_derivation(config.master_seed, algorithm, h, repetition);
    let attempt = || -> Result<(String, Vec<ResultRow>, f64, usize)> {
        let scenario = scenario
            .as_ref()
            .map_err(|e| TjapError::Generation(e.to_string()))?;
        let records = run_cell(config, scenario, algorithm, h, repetition)?;
        let label = RunLabel {
            algorithm: algorithm.name().into(),
            h,
            d: config.d,
            s0: config.s0,
            n_items: config.n_items,
            capacity: config.capacity,
            seed: seeds.scenario,
        };
        let text = run_csv(&label, &records);
        let file = run_file_name(algorithm, h, repetition);
        fs::write(out_dir.join(&file), &text)?;
        // aggregate from the written text so it matches what verify re-reads
        let rows = parse_run_csv(&text)?;
        let last = records.last().map_or(0.0, |r| r.cum_regret);
        let forced = records.iter().filter(|r| r.forced).count();
        Ok((file, rows, last, forced))
    };
    let base = CellReport {
        algorithm: algorithm.name().into(),
        h,
        repetition,
        seeds,
        status: CellStatus::Ok,
        error: None,
        file: None,
        final_cum_regret: None,
        forced_rounds: None,
        wall_clock_seconds: 0.0,
    };
    match attempt() {
        Ok((file, rows, last, forced)) => (
            CellReport {
                file: Some(file),
                final_cum_regret: Some(last),
                forced_rounds: Some(forced),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
                ..base
            },
            Some(rows),
        ),
        Err(e) => (
            CellReport {
                status: CellStatus::Failed,
                error: Some(e.to_string()),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
                ..base
            },
            None,
        ),
    }
}

/// Summary of a successful verification.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub runs: usize,
    pub aggregate_rows: usize,
    pub max_relative_gap: f64,
}

/// Relative gap allowed between a stored mean and its recomputation; covers
/// the 9-digit rounding of the stored value.
pub const VERIFY_TOLERANCE: f64 = 1e-8;

/// Recomputes the aggregate from the run files listed in the manifest and
/// compares it with the stored aggregate.
pub fn verify_output(out_dir: &Path) -> Result<VerifyReport> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(out_dir.join(MANIFEST_FILE))?)?;
    let mut runs = Vec::new();
    for cell in manifest.cells.iter().filter(|c| c.status == CellStatus::Ok) {
        let file = cell.file.as_ref().ok_or_else(|| {
            TjapError::Verification(format!("cell {} H={} has no file", cell.algorithm, cell.h))
        })?;
        let path: PathBuf = out_dir.join(file);
        let rows = parse_run_csv(&fs::read_to_string(&path)?)
            .map_err(|e| TjapError::Verification(format!("{}: {e}", path.display())))?;
        runs.push(rows);
    }
    let recomputed = aggregate(&runs)?;
    let stored = parse_aggregate_csv(&fs::read_to_string(out_dir.join(&manifest.aggregate))?)?;
    if recomputed.len() != stored.len() {
        return Err(TjapError::Verification(format!(
            "aggregate has {} rows, run files give {}",
            stored.len(),
            recomputed.len()
        )));
    }
    let mut worst = 0.0_f64;
    for (k, (a, b)) in recomputed.iter().zip(&stored).enumerate() {
        let keys_match = a.algorithm == b.algorithm
            && (a.h, a.d, a.s0, a.n_items, a.capacity, a.runs, a.t)
                == (b.h, b.d, b.s0, b.n_items, b.capacity, b.runs, b.t);
        if !keys_match {
            return Err(TjapError::Verification(format!(
                "aggregate row {} has different keys",
                k + 2
            )));
        }
        for (x, y) in [
            (a.mean_cum_regret, b.mean_cum_regret),
            (a.mean_forced, b.mean_forced),
        ] {
            let gap = (x - y).abs() / x.abs().max(1.0);
            worst = worst.max(gap);
            if gap > VERIFY_TOLERANCE {
                return Err(TjapError::Verification(format!(
                    "aggregate row {}: stored mean {y} but run files give {x}",
                    k + 2
                )));
            }
        }
    }
    Ok(VerifyReport {
        runs: runs.len(),
        aggregate_rows: stored.len(),
        max_relative_gap: worst,
    })
}
