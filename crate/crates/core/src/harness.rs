//! Replicated experiments: single scenarios, parameter sweeps and moving-fire
//! adaptation runs, plus their CSV outputs.
//!
//! Replications run in parallel, but each one owns a seed derived from the
//! master seed, the parameter point and the replication index, and results
//! are collected in replication order. Outputs are therefore identical for
//! any thread count.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, FireSpec, Measure, SweepParam};
use crate::engine::{Engine, EngineError};
use crate::metrics::{self, MetricsError, RunMetrics, Stat, SummaryPoint, SweepRow, SweepSummary};
use crate::qlearning::QTable;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("replication {replication} (seed {seed}): {source}")]
    Engine {
        replication: usize,
        seed: u64,
        source: EngineError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("adaptation run needs a [period] section")]
    NoPeriod,
    #[error("fire change at step {0} does not fall on a period boundary")]
    MisalignedChange(u64),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// One finished replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub replication: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub qtable: QTable,
}

/// Runs every replication of `cfg` at sweep point `point`.
pub fn replicate(cfg: &ExperimentConfig, point: u64) -> Result<Vec<RunRecord>, HarnessError> {
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.seed, point, r as u64);
            let fail = |source| HarnessError::Engine {
                replication: r,
                seed,
                source,
            };
            let mut engine = Engine::new(cfg.engine_config(seed, cfg.total_steps)).map_err(fail)?;
            let metrics = match cfg.measure {
                Measure::Fire => engine.run_observed(cfg.total_steps, cfg.coverage, &mut ()),
                Measure::Coverage => engine.explore(cfg.coverage_cap, cfg.coverage),
            }
            .map_err(fail)?;
            Ok(RunRecord {
                replication: r,
                seed,
                metrics,
                qtable: engine.qtable().clone(),
            })
        })
        .collect()
}

/// Result of a single-scenario experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub runs: Vec<RunRecord>,
    pub summary: SummaryPoint,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let runs = replicate(cfg, 0)?;
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let summary = metrics::aggregate(&metrics)?;
    Ok(RunOutput { runs, summary })
}

/// Runs every point of the configured sweep in ascending parameter order;
/// point `p` of that order seeds its replications, except that every point
/// of a `steps` sweep uses the seeds of point 0. Without a `[sweep]`
/// section the result has a single row for the base configuration.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary, HarnessError> {
    cfg.validate()?;
    let (name, points) = match &cfg.sweep {
        Some(axis) => {
            let mut values = axis.values.clone();
            values.sort_by(f64::total_cmp);
            (axis.param.name().to_string(), values.into_iter().map(|v| Some((axis.param, v))).collect())
        }
        None => ("none".to_string(), vec![None]),
    };
    let mut rows = Vec::new();
    for (p, point) in points.into_iter().enumerate() {
        let mut local = cfg.clone();
        local.sweep = None;
        let value = match point {
            Some((param, v)) => {
                local.apply(param, v)?;
                v
            }
            None => 0.0,
        };
        // A run allotted T steps is exactly the first T steps of a longer run
        // with the same seed, so horizon points share replication seeds.
        let seed_point = match point {
            Some((SweepParam::Steps, _)) => 0,
            _ => p as u64,
        };
        let runs = replicate(&local, seed_point)?;
        let metrics: Vec<RunMetrics> = runs.into_iter().map(|r| r.metrics).collect();
        rows.push(SweepRow {
            param_value: value,
            n_agents: local.num_agents(),
            steps: local.total_steps,
            summary: metrics::aggregate(&metrics)?,
        });
    }
    Ok(SweepSummary { param_name: name, rows })
}

/// Fire-time fraction of one period, aggregated over replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodRow {
    pub period: usize,
    pub start_step: u64,
    pub fire_fraction: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutput {
    pub periods: Vec<PeriodRow>,
    /// The fire never moves within the run, so there is nothing to adapt to.
    pub degenerate: bool,
}

pub fn run_adaptation(cfg: &ExperimentConfig) -> Result<AdaptOutput, HarnessError> {
    let period = cfg.period.ok_or(HarnessError::NoPeriod)?;
    let degenerate = match &cfg.fire {
        FireSpec::Segments(s) => {
            if let Some(bad) = s.segment_starts().find(|t| t % period.length != 0) {
                return Err(HarnessError::MisalignedChange(bad));
            }
            s.segment_starts().filter(|&t| t < cfg.total_steps).count() < 2
        }
        FireSpec::Relocating { every, .. } => {
            if every % period.length != 0 {
                return Err(HarnessError::MisalignedChange(*every));
            }
            *every >= cfg.total_steps
        }
    };
    let runs = replicate(cfg, 0)?;
    let num_periods = cfg.total_steps.div_ceil(period.length) as usize;
    let periods = (0..num_periods)
        .map(|k| {
            let samples: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.metrics.per_period_fire_fraction.get(k).copied())
                .collect();
            PeriodRow {
                period: k,
                start_step: k as u64 * period.length,
                fire_fraction: Stat::of(&samples).expect("every run covers every period"),
            }
        })
        .collect();
    Ok(AdaptOutput { periods, degenerate })
}

pub const RUNS_CSV_HEADER: [&str; 7] = [
    "replication",
    "seed",
    "n_agents",
    "agent_steps",
    "fire_steps",
    "fire_fraction",
    "coverage_step",
];

pub fn write_runs_csv<W: Write>(writer: W, runs: &[RunRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RUNS_CSV_HEADER)?;
    for r in runs {
        let m = &r.metrics;
        w.write_record([
            r.replication.to_string(),
            r.seed.to_string(),
            m.num_agents.to_string(),
            m.total_agent_steps.to_string(),
            m.fire_steps.to_string(),
            metrics::fire_time_fraction(m).map_or(String::new(), |f| f.to_string()),
            m.coverage_step.map_or(String::new(), |c| c.to_string()),
        ])?;
    }
    w.flush()
}

pub fn write_summary_csv<W: Write>(writer: W, summary: &SummaryPoint) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "n", "mean", "std", "std_defined"])?;
    let mut row = |name: &str, s: &Stat| {
        w.write_record([
            name.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.std_defined.to_string(),
        ])
    };
    row("fire_fraction", &summary.fire_fraction)?;
    if let Some(c) = &summary.coverage_steps {
        row("coverage_steps", c)?;
    }
    w.flush()
}

/// Per-state value and greedy action.
pub fn write_values_csv<W: Write>(writer: W, q: &QTable) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["state", "value", "greedy_action"])?;
    let policy = metrics::extract_policy(q);
    for (s, v) in metrics::extract_values(q).iter().enumerate() {
        w.write_record([s.to_string(), v.to_string(), policy[s].name().to_string()])?;
    }
    w.flush()
}

pub fn write_periods_csv<W: Write>(writer: W, out: &AdaptOutput) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["period", "start_step", "runs", "mean_fire_fraction", "std_fire_fraction"])?;
    for p in &out.periods {
        w.write_record([
            p.period.to_string(),
            p.start_step.to_string(),
            p.fire_fraction.n.to_string(),
            p.fire_fraction.mean.to_string(),
            p.fire_fraction.std.to_string(),
        ])?;
    }
    w.flush()
}

fn create(dir: &Path, name: &str) -> io::Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes `resolved.cfg`, `runs.csv`, `metrics.csv`, and the learned table of
/// replication 0 as `qtable.csv` and `values.csv`.
pub fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    write_runs_csv(create(dir, "runs.csv")?, &out.runs)?;
    write_summary_csv(create(dir, "metrics.csv")?, &out.summary)?;
    if let Some(first) = out.runs.first() {
        first.qtable.write_csv(create(dir, "qtable.csv")?)?;
        write_values_csv(create(dir, "values.csv")?, &first.qtable)?;
    }
    Ok(())
}

pub fn write_sweep_outputs(dir: &Path, cfg: &ExperimentConfig, out: &SweepSummary) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    out.write_csv(create(dir, "sweep.csv")?)
}

pub fn write_adapt_outputs(dir: &Path, cfg: &ExperimentConfig, out: &AdaptOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    write_periods_csv(create(dir, "periods.csv")?, out)
}
