//! N agents acting against one shared Q-table.
//!
//! A tick advances every agent once, in ascending id order; each agent sees
//! the table as left by the lower-id agents of the same tick. Schedule clocks
//! count ticks since the last period boundary.

use thiserror::Error;

use crate::mdp::{Action, CellState, FireSchedule, GridSpec, MdpError};
use crate::metrics::{Coverage, RunMetrics, RunRecorder};
use crate::qlearning::{self, Experience, LearnParams, QError, QRow, QTable};
use crate::seed::{self, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("engine needs at least one agent")]
    NoAgents,
    #[error("start cell {0} lies outside the grid")]
    StartOutOfGrid(CellState),
    #[error("total_steps must be at least 1")]
    NoSteps,
    #[error("period length must be positive")]
    PeriodLength,
    #[error("temperature schedule reaches {0}; Boltzmann exploration needs T > 0")]
    NonPositiveTemperature(f64),
    #[error("epsilon schedule must stay within [0, 1], starts at {0}")]
    EpsilonRange(f64),
    #[error("coverage not reached after {steps} steps ({} of {} targets visited)",
            visited.iter().filter(|v| **v).count(), visited.len())]
    CoverageTimeout { steps: u64, visited: Vec<bool> },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Q(#[from] QError),
}

/// How agents turn Q-values into actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Softmax with the exploration schedule as temperature.
    #[default]
    Boltzmann,
    /// ε-greedy with the exploration schedule as ε.
    EpsilonGreedy,
    /// Pure exploitation; draws no random numbers.
    Greedy,
}

impl Strategy {
    /// Action distribution for `row` given the current exploration value.
    pub fn probs(self, row: &QRow, exploration: f64) -> Result<QRow, QError> {
        match self {
            Strategy::Boltzmann => qlearning::boltzmann_probs(row, exploration),
            Strategy::EpsilonGreedy => qlearning::epsilon_greedy_probs(row, exploration),
            Strategy::Greedy => {
                let mut p = [0.0; Action::COUNT];
                p[qlearning::greedy_action(row).index()] = 1.0;
                Ok(p)
            }
        }
    }

    pub fn choose(self, row: &QRow, exploration: f64, rng: &mut StreamRng) -> Result<Action, QError> {
        match self {
            Strategy::Greedy => Ok(qlearning::greedy_action(row)),
            _ => Ok(qlearning::sample_action(&self.probs(row, exploration)?, rng)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodMode {
    /// Zero the table and restart both schedule clocks.
    Reset,
    /// Keep the table and the learning-rate clock; restart the temperature
    /// clock at the warm-restart offset.
    CarryForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodPolicy {
    pub length: u64,
    pub mode: PeriodMode,
    /// Temperature clock offset after a carry-forward boundary, in half-lives.
    pub warm_restart: f64,
}

impl PeriodPolicy {
    pub fn new(length: u64, mode: PeriodMode) -> Result<Self, EngineError> {
        if length == 0 {
            return Err(EngineError::PeriodLength);
        }
        Ok(Self {
            length,
            mode,
            warm_restart: 2.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    pub cell: CellState,
    pub rng: StreamRng,
}

/// Tick-relative schedule clock: `t = (step - origin) + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Clock {
    origin: u64,
    offset: f64,
}

impl Clock {
    fn at(&self, step: u64) -> f64 {
        (step - self.origin) as f64 + self.offset
    }
}

/// Everything needed to build an engine.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub grid: GridSpec,
    pub schedule: FireSchedule,
    pub params: LearnParams,
    pub strategy: Strategy,
    pub period: Option<PeriodPolicy>,
    /// One start cell per agent.
    pub starts: Vec<CellState>,
    pub seed: u64,
}

impl EngineConfig {
    /// Standard scenario: `num_agents` agents all starting at `start`.
    pub fn new(schedule: FireSchedule, num_agents: usize, start: usize, seed: u64) -> Result<Self, EngineError> {
        let grid = schedule.grid();
        let cell = grid.cell(start)?;
        Ok(Self {
            grid,
            schedule,
            params: LearnParams::default(),
            strategy: Strategy::default(),
            period: None,
            starts: vec![cell; num_agents],
            seed,
        })
    }
}

/// One agent-step, emitted in canonical order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub step: u64,
    pub agent: usize,
    pub state: usize,
    pub action: Action,
    pub reward: f64,
    pub next_state: usize,
    pub alpha: f64,
    pub exploration: f64,
    pub new_q: f64,
}

pub trait Observer {
    fn on_step(&mut self, event: &StepEvent);
    /// Called after every agent has moved; `completed` ticks are done.
    fn on_tick_end(&mut self, _completed: u64) {}
    fn on_period_boundary(&mut self, _completed: u64) {}
}

impl Observer for () {
    fn on_step(&mut self, _: &StepEvent) {}
}

impl<F: FnMut(&StepEvent)> Observer for F {
    fn on_step(&mut self, event: &StepEvent) {
        self(event)
    }
}

/// Fans events out to two observers.
pub struct Tee<'a, A: Observer + ?Sized, B: Observer + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: Observer + ?Sized, B: Observer + ?Sized> Observer for Tee<'_, A, B> {
    fn on_step(&mut self, e: &StepEvent) {
        self.0.on_step(e);
        self.1.on_step(e);
    }
    fn on_tick_end(&mut self, c: u64) {
        self.0.on_tick_end(c);
        self.1.on_tick_end(c);
    }
    fn on_period_boundary(&mut self, c: u64) {
        self.0.on_period_boundary(c);
        self.1.on_period_boundary(c);
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    grid: GridSpec,
    schedule: FireSchedule,
    params: LearnParams,
    strategy: Strategy,
    period: Option<PeriodPolicy>,
    qtable: QTable,
    agents: Vec<AgentState>,
    step: u64,
    temp_clock: Clock,
    alpha_clock: Clock,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        let EngineConfig {
            grid,
            schedule,
            params,
            strategy,
            period,
            starts,
            seed,
        } = config;
        if starts.is_empty() {
            return Err(EngineError::NoAgents);
        }
        if schedule.grid() != grid {
            return Err(MdpError::ScheduleGrid.into());
        }
        if let Some(bad) = starts.iter().find(|c| !grid.contains(**c)) {
            return Err(EngineError::StartOutOfGrid(*bad));
        }
        if period.is_some_and(|p| p.length == 0) {
            return Err(EngineError::PeriodLength);
        }
        LearnParams::new(params.gamma, params.alpha, params.temperature)?;
        match strategy {
            Strategy::Boltzmann if params.temperature.v_min() <= 0.0 => {
                return Err(EngineError::NonPositiveTemperature(params.temperature.v_min()))
            }
            Strategy::EpsilonGreedy if params.temperature.v_max() > 1.0 => {
                return Err(EngineError::EpsilonRange(params.temperature.v_max()))
            }
            _ => {}
        }
        let agents = starts
            .into_iter()
            .enumerate()
            .map(|(id, cell)| AgentState {
                id,
                cell,
                rng: seed::agent_rng(seed, id),
            })
            .collect();
        let zero = Clock { origin: 0, offset: 0.0 };
        Ok(Self {
            qtable: QTable::new(grid.num_states()),
            grid,
            schedule,
            params,
            strategy,
            period,
            agents,
            step: 0,
            temp_clock: zero,
            alpha_clock: zero,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn schedule(&self) -> &FireSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &LearnParams {
        &self.params
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn period(&self) -> Option<PeriodPolicy> {
        self.period
    }

    pub fn qtable(&self) -> &QTable {
        &self.qtable
    }

    pub fn qtable_mut(&mut self) -> &mut QTable {
        &mut self.qtable
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Completed ticks.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_strategy(&mut self, strategy: Strategy) {
        self.strategy = strategy;
    }

    pub fn agent_states(&self) -> Vec<usize> {
        self.agents.iter().map(|a| self.grid.state_index(a.cell)).collect()
    }

    pub fn temperature_clock(&self) -> f64 {
        self.temp_clock.at(self.step)
    }

    pub fn alpha_clock(&self) -> f64 {
        self.alpha_clock.at(self.step)
    }

    /// Current exploration value (temperature or ε).
    pub fn exploration(&self) -> f64 {
        self.params.temperature.value(self.temperature_clock())
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha.value(self.alpha_clock())
    }

    /// Advances every agent once.
    pub fn tick(&mut self, observer: &mut (impl Observer + ?Sized)) -> Result<(), EngineError> {
        let exploration = self.exploration();
        let alpha = self.alpha();
        let gamma = self.params.gamma;
        for agent in &mut self.agents {
            let state = self.grid.state_index(agent.cell);
            let action = self
                .strategy
                .choose(self.qtable.row(state)?, exploration, &mut agent.rng)?;
            let reward = self.schedule.reward_at(self.step, agent.cell);
            let next_cell = self.grid.step(agent.cell, action);
            let next_state = self.grid.state_index(next_cell);
            let new_q = self.qtable.update(
                &Experience {
                    state,
                    action,
                    reward,
                    next_state,
                },
                alpha,
                gamma,
            )?;
            agent.cell = next_cell;
            observer.on_step(&StepEvent {
                step: self.step,
                agent: agent.id,
                state,
                action,
                reward,
                next_state,
                alpha,
                exploration,
                new_q,
            });
        }
        self.step += 1;
        observer.on_tick_end(self.step);
        if let Some(p) = self.period {
            if self.step.is_multiple_of(p.length) {
                self.apply_period_boundary();
                observer.on_period_boundary(self.step);
            }
        }
        Ok(())
    }

    /// Applies the configured period policy at the current step. Without a
    /// period policy this is a no-op.
    pub fn apply_period_boundary(&mut self) {
        let Some(policy) = self.period else { return };
        match policy.mode {
            PeriodMode::Reset => {
                self.qtable.reset();
                self.temp_clock = Clock {
                    origin: self.step,
                    offset: 0.0,
                };
                self.alpha_clock = self.temp_clock;
            }
            PeriodMode::CarryForward => {
                self.temp_clock = Clock {
                    origin: self.step,
                    offset: policy.warm_restart * self.params.temperature.half_life(),
                };
            }
        }
    }

    /// Fresh recorder matching the engine's current placement.
    pub fn recorder(&self, coverage: Coverage) -> RunRecorder {
        RunRecorder::new(self.grid.num_states(), &self.agent_states(), coverage)
    }

    pub fn run(&mut self, total_steps: u64) -> Result<RunMetrics, EngineError> {
        self.run_observed(total_steps, Coverage::States, &mut ())
    }

    pub fn run_observed(
        &mut self,
        total_steps: u64,
        coverage: Coverage,
        observer: &mut (impl Observer + ?Sized),
    ) -> Result<RunMetrics, EngineError> {
        if total_steps == 0 {
            return Err(EngineError::NoSteps);
        }
        let mut recorder = self.recorder(coverage);
        for _ in 0..total_steps {
            self.tick(&mut Tee(&mut recorder, observer))?;
        }
        Ok(recorder.finish())
    }

    /// Ticks until every coverage target has been visited and returns the
    /// number of ticks that took (0 if the initial placement already covers).
    pub fn run_until_full_exploration(&mut self, max_steps: u64, coverage: Coverage) -> Result<u64, EngineError> {
        Ok(self.explore(max_steps, coverage)?.coverage_step.unwrap_or(0))
    }

    /// Like [`Engine::run_until_full_exploration`], returning the metrics of
    /// the whole exploration run. `coverage_step` is always set on success.
    pub fn explore(&mut self, max_steps: u64, coverage: Coverage) -> Result<RunMetrics, EngineError> {
        let mut recorder = self.recorder(coverage);
        let mut taken = 0;
        while !recorder.is_covered() {
            if taken == max_steps {
                return Err(EngineError::CoverageTimeout {
                    steps: taken,
                    visited: recorder.visited().to_vec(),
                });
            }
            self.tick(&mut recorder)?;
            taken += 1;
        }
        let mut metrics = recorder.finish();
        metrics.coverage_step = Some(taken);
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardField;
    use crate::qlearning::DecaySchedule;

    fn grid() -> GridSpec {
        GridSpec::new(4, 4).unwrap()
    }

    fn fire() -> FireSchedule {
        FireSchedule::stationary(RewardField::with_fire_states(grid(), &[2, 3, 6, 7], 1.0).unwrap())
    }

    fn engine(agents: usize, seed: u64) -> Engine {
        Engine::new(EngineConfig::new(fire(), agents, 13, seed).unwrap()).unwrap()
    }

    #[test]
    fn construction_errors() {
        let mut c = EngineConfig::new(fire(), 0, 13, 1).unwrap();
        assert_eq!(Engine::new(c.clone()).unwrap_err(), EngineError::NoAgents);
        c.starts = vec![CellState::new(4, 0)];
        assert!(matches!(Engine::new(c.clone()), Err(EngineError::StartOutOfGrid(_))));
        c.starts = vec![CellState::new(0, 0)];
        c.params.temperature = DecaySchedule::new(1.0, 0.0, 10.0).unwrap();
        assert!(matches!(Engine::new(c.clone()), Err(EngineError::NonPositiveTemperature(_))));
        c.strategy = Strategy::EpsilonGreedy;
        c.params.temperature = DecaySchedule::new(2.0, 0.0, 10.0).unwrap();
        assert!(matches!(Engine::new(c.clone()), Err(EngineError::EpsilonRange(_))));
        c.strategy = Strategy::Greedy;
        c.params.gamma = 1.0;
        assert!(matches!(Engine::new(c), Err(EngineError::Q(QError::Gamma(_)))));
        assert!(EngineConfig::new(fire(), 1, 16, 1).is_err());
    }

    #[test]
    fn zero_steps_rejected_without_side_effects() {
        let mut e = engine(2, 5);
        let before = e.clone();
        assert_eq!(e.run(0).unwrap_err(), EngineError::NoSteps);
        assert_eq!(e.qtable(), before.qtable());
        assert_eq!(e.step(), 0);
    }

    #[test]
    fn deterministic_for_same_seed() {
        let (mut a, mut b) = (engine(2, 77), engine(2, 77));
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        a.run_observed(300, Coverage::States, &mut |e: &StepEvent| ta.push(*e)).unwrap();
        b.run_observed(300, Coverage::States, &mut |e: &StepEvent| tb.push(*e)).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.qtable(), b.qtable());
        let mut c = engine(2, 78);
        let mut tc = Vec::new();
        c.run_observed(300, Coverage::States, &mut |e: &StepEvent| tc.push(*e)).unwrap();
        assert_ne!(ta, tc);
    }

    #[test]
    fn canonical_event_order() {
        let mut e = engine(3, 1);
        let mut seen = Vec::new();
        e.run_observed(4, Coverage::States, &mut |ev: &StepEvent| seen.push((ev.step, ev.agent)))
            .unwrap();
        let expect: Vec<_> = (0..4).flat_map(|t| (0..3).map(move |a| (t, a))).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn later_agents_see_earlier_updates() {
        // Replaying the event stream through a single table in event order
        // must reproduce every reported new Q value.
        let mut e = engine(5, 3);
        let mut events = Vec::new();
        e.run_observed(60, Coverage::States, &mut |ev: &StepEvent| events.push(*ev)).unwrap();
        let mut q = QTable::new(16);
        for ev in &events {
            let exp = Experience {
                state: ev.state,
                action: ev.action,
                reward: ev.reward,
                next_state: ev.next_state,
            };
            assert_eq!(q.update(&exp, ev.alpha, 0.9).unwrap(), ev.new_q);
        }
        assert_eq!(&q, e.qtable());
    }

    #[test]
    fn reward_is_earned_in_current_state() {
        let mut e = engine(1, 11);
        let mut events = Vec::new();
        e.run_observed(200, Coverage::States, &mut |ev: &StepEvent| events.push(*ev)).unwrap();
        for ev in events {
            assert_eq!(ev.reward > 0.0, [2, 3, 6, 7].contains(&ev.state));
            assert_eq!(grid().step_index(ev.state, ev.action), ev.next_state);
        }
    }

    #[test]
    fn uniform_random_walk_with_zero_rewards() {
        let sched = FireSchedule::stationary(RewardField::zeros(grid()));
        let mut cfg = EngineConfig::new(sched, 1, 13, 99).unwrap();
        cfg.params.temperature = DecaySchedule::constant(1e6).unwrap();
        let mut e = Engine::new(cfg).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        e.run_observed(n, Coverage::States, &mut |ev: &StepEvent| counts[ev.action.index()] += 1)
            .unwrap();
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!(e.qtable().rows().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn greedy_draws_no_randomness() {
        let mut cfg = EngineConfig::new(fire(), 1, 13, 5).unwrap();
        cfg.strategy = Strategy::Greedy;
        let mut e = Engine::new(cfg).unwrap();
        let rng_before = e.agents()[0].rng.clone();
        e.run(10).unwrap();
        assert_eq!(e.agents()[0].rng, rng_before);
        // All-zero table: Left tie-break walks to the left wall.
        assert_eq!(e.agent_states(), vec![12]);
    }

    #[test]
    fn coverage_counts_initial_placement() {
        let cells: Vec<_> = (0..16).map(|i| grid().cell(i).unwrap()).collect();
        let mut cfg = EngineConfig::new(fire(), 16, 13, 1).unwrap();
        cfg.starts = cells;
        let mut e = Engine::new(cfg).unwrap();
        assert_eq!(e.run_until_full_exploration(10, Coverage::States).unwrap(), 0);
        assert_eq!(e.step(), 0);

        let e = engine(1, 1);
        let rec = e.recorder(Coverage::States);
        assert!(rec.visited()[13]);
        assert_eq!(rec.visited().iter().filter(|v| **v).count(), 1);
    }

    #[test]
    fn coverage_timeout_carries_bitmap() {
        let mut e = engine(1, 4);
        match e.run_until_full_exploration(3, Coverage::States) {
            Err(EngineError::CoverageTimeout { steps: 3, visited }) => {
                assert_eq!(visited.len(), 16);
                assert!(visited[13]);
                assert!(visited.iter().filter(|v| **v).count() <= 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn state_action_coverage_takes_longer() {
        let mut cfg = EngineConfig::new(fire(), 4, 13, 8).unwrap();
        cfg.params.temperature = DecaySchedule::constant(1e3).unwrap();
        let mut a = Engine::new(cfg.clone()).unwrap();
        let mut b = Engine::new(cfg).unwrap();
        let states = a.run_until_full_exploration(100_000, Coverage::States).unwrap();
        let pairs = b.run_until_full_exploration(100_000, Coverage::StateActions).unwrap();
        assert!(pairs >= states);
    }

    #[test]
    fn reset_boundary_restores_fresh_learning_state() {
        let mut cfg = EngineConfig::new(fire(), 3, 13, 21).unwrap();
        cfg.period = Some(PeriodPolicy::new(40, PeriodMode::Reset).unwrap());
        let mut e = Engine::new(cfg.clone()).unwrap();
        e.run(39).unwrap();
        assert!(e.qtable().rows().iter().flatten().any(|&v| v != 0.0));
        assert!(e.exploration() < 1.0);
        e.run(1).unwrap();
        assert_eq!(e.step(), 40);

        let fresh = Engine::new(cfg).unwrap();
        assert_eq!(e.qtable(), fresh.qtable());
        assert_eq!(e.exploration(), fresh.exploration());
        assert_eq!(e.alpha(), fresh.alpha());
        assert_eq!(e.exploration(), 1.0);
        assert_eq!(e.alpha(), 0.9);
    }

    #[test]
    fn carry_forward_keeps_table_and_warm_restarts() {
        let mut cfg = EngineConfig::new(fire(), 3, 13, 21).unwrap();
        cfg.period = Some(PeriodPolicy::new(40, PeriodMode::CarryForward).unwrap());
        let mut e = Engine::new(cfg).unwrap();
        e.run(39).unwrap();
        let table = e.qtable().clone();
        let alpha_clock = e.alpha_clock();
        e.apply_period_boundary();
        assert_eq!(e.qtable(), &table);
        assert_eq!(e.alpha_clock(), alpha_clock);
        // Two half-lives in: a quarter of the range above the floor.
        assert!((e.exploration() - (0.01 + 0.99 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn agent_steps_are_conserved() {
        let mut e = engine(7, 2);
        let m = e.run(123).unwrap();
        assert_eq!(m.total_agent_steps, 7 * 123);
        assert_eq!(m.visit_counts.iter().sum::<u64>(), 7 * 123 + 7);
        assert!(m.fire_steps <= m.total_agent_steps);
    }
}
