//! Per-run accounting and cross-run aggregation.

use std::io::{self, Write};

use thiserror::Error;

use crate::engine::{Observer, StepEvent};
use crate::mdp::Action;
use crate::qlearning::QTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("run recorded no agent-steps")]
    EmptyRun,
    #[error("cannot aggregate zero runs")]
    NoRuns,
}

/// What counts as full exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coverage {
    /// Every state occupied at least once.
    #[default]
    States,
    /// Every (state, action) pair tried at least once.
    StateActions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub num_agents: usize,
    /// Initial placements plus one landing cell per agent-step.
    pub visit_counts: Vec<u64>,
    /// Agent-steps taken from a cell with positive reward.
    pub fire_steps: u64,
    pub total_agent_steps: u64,
    /// Ticks until the coverage target was met, if it was.
    pub coverage_step: Option<u64>,
    pub per_period_fire_fraction: Vec<f64>,
}

/// Observer accumulating [`RunMetrics`] from the event stream.
#[derive(Debug, Clone)]
pub struct RunRecorder {
    coverage: Coverage,
    visited: Vec<bool>,
    remaining: usize,
    metrics: RunMetrics,
    ticks: u64,
    window_fire: u64,
    window_total: u64,
}

impl RunRecorder {
    pub fn new(num_states: usize, initial_states: &[usize], coverage: Coverage) -> Self {
        let targets = match coverage {
            Coverage::States => num_states,
            Coverage::StateActions => num_states * Action::COUNT,
        };
        let mut visit_counts = vec![0; num_states];
        let mut visited = vec![false; targets];
        for &s in initial_states {
            visit_counts[s] += 1;
            if coverage == Coverage::States {
                visited[s] = true;
            }
        }
        let remaining = visited.iter().filter(|v| !**v).count();
        Self {
            coverage,
            visited,
            remaining,
            metrics: RunMetrics {
                num_agents: initial_states.len(),
                visit_counts,
                fire_steps: 0,
                total_agent_steps: 0,
                coverage_step: (remaining == 0).then_some(0),
                per_period_fire_fraction: Vec::new(),
            },
            ticks: 0,
            window_fire: 0,
            window_total: 0,
        }
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn is_covered(&self) -> bool {
        self.remaining == 0
    }

    fn mark(&mut self, target: usize) {
        if !self.visited[target] {
            self.visited[target] = true;
            self.remaining -= 1;
        }
    }

    fn close_window(&mut self) {
        if self.window_total > 0 {
            self.metrics
                .per_period_fire_fraction
                .push(self.window_fire as f64 / self.window_total as f64);
        }
        self.window_fire = 0;
        self.window_total = 0;
    }

    pub fn finish(mut self) -> RunMetrics {
        self.close_window();
        self.metrics
    }
}

impl Observer for RunRecorder {
    fn on_step(&mut self, e: &StepEvent) {
        let m = &mut self.metrics;
        m.total_agent_steps += 1;
        m.visit_counts[e.next_state] += 1;
        self.window_total += 1;
        if e.reward > 0.0 {
            m.fire_steps += 1;
            self.window_fire += 1;
        }
        match self.coverage {
            Coverage::States => self.mark(e.next_state),
            Coverage::StateActions => self.mark(e.state * Action::COUNT + e.action.index()),
        }
    }

    fn on_tick_end(&mut self, _completed: u64) {
        self.ticks += 1;
        if self.remaining == 0 && self.metrics.coverage_step.is_none() {
            self.metrics.coverage_step = Some(self.ticks);
        }
    }

    fn on_period_boundary(&mut self, _completed: u64) {
        self.close_window();
    }
}

pub fn fire_time_fraction(m: &RunMetrics) -> Result<f64, MetricsError> {
    if m.total_agent_steps == 0 {
        return Err(MetricsError::EmptyRun);
    }
    Ok(m.fire_steps as f64 / m.total_agent_steps as f64)
}

/// State values `V(s) = max_a Q(s, a)`.
pub fn extract_values(q: &QTable) -> Vec<f64> {
    (0..q.num_states()).map(|s| q.max_value(s)).collect()
}

pub fn extract_policy(q: &QTable) -> Vec<Action> {
    (0..q.num_states()).map(|s| q.greedy_action(s)).collect()
}

/// Sample mean and (n-1)-denominator standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Zero when `n == 1`; see `std_defined`.
    pub std: f64,
    pub std_defined: bool,
}

impl Stat {
    pub fn of(samples: &[f64]) -> Option<Self> {
        let n = samples.len();
        if n == 0 {
            return None;
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            std,
            std_defined: n > 1,
        })
    }
}

/// Aggregate over the runs of one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryPoint {
    pub runs: usize,
    pub fire_fraction: Stat,
    /// Over the runs that reached coverage; `None` if none did.
    pub coverage_steps: Option<Stat>,
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<SummaryPoint, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    // A coverage run can end at tick 0 when the placement already covers;
    // such runs carry no fire fraction.
    let fractions: Vec<f64> = runs.iter().filter_map(|r| fire_time_fraction(r).ok()).collect();
    if fractions.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let coverage: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.coverage_step.map(|c| c as f64))
        .collect();
    Ok(SummaryPoint {
        runs: runs.len(),
        fire_fraction: Stat::of(&fractions).expect("checked nonempty"),
        coverage_steps: Stat::of(&coverage),
    })
}

/// One row of a sweep: a parameter value and its aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param_value: f64,
    pub n_agents: usize,
    pub steps: u64,
    pub summary: SummaryPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub param_name: String,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 8] = [
    "param_name",
    "param_value",
    "n_agents",
    "steps",
    "mean_fire_fraction",
    "std_fire_fraction",
    "mean_coverage_steps",
    "std_coverage_steps",
];

impl SweepSummary {
    pub fn write_csv<W: Write>(&self, writer: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SWEEP_CSV_HEADER)?;
        for row in &self.rows {
            let s = &row.summary;
            let (cov_mean, cov_std) = match s.coverage_steps {
                Some(c) => (c.mean.to_string(), c.std.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                self.param_name.clone(),
                row.param_value.to_string(),
                row.n_agents.to_string(),
                row.steps.to_string(),
                s.fire_fraction.mean.to_string(),
                s.fire_fraction.std.to_string(),
                cov_mean,
                cov_std,
            ])?;
        }
        w.flush()
    }

    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.summary.fire_fraction.mean).collect()
    }
}
