//! Tabular Q-learning: the shared action-value table, the one-step update,
//! Boltzmann and ε-greedy action selection, and half-life decay schedules.

use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::mdp::Action;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QError {
    #[error("learning rate must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("discount factor must lie in [0, 1), got {0}")]
    Gamma(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("epsilon must lie in [0, 1], got {0}")]
    Epsilon(f64),
    #[error("state {index} out of range for table with {num_states} states")]
    State { index: usize, num_states: usize },
    #[error("invalid decay schedule: {0}")]
    Schedule(String),
    #[error("reward must be finite, got {0}")]
    Reward(f64),
}

/// Exponential half-life decay from `v_max` toward `v_min`:
/// `v(t) = v_min + (v_max - v_min) * 2^(-t / half_life)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySchedule {
    v_max: f64,
    v_min: f64,
    half_life: f64,
}

impl DecaySchedule {
    pub fn new(v_max: f64, v_min: f64, half_life: f64) -> Result<Self, QError> {
        if !(v_max.is_finite() && v_min.is_finite() && v_min >= 0.0 && v_max >= v_min) {
            return Err(QError::Schedule(format!(
                "need v_max >= v_min >= 0, got v_max={v_max} v_min={v_min}"
            )));
        }
        if !half_life.is_finite() || half_life <= 0.0 {
            return Err(QError::Schedule(format!(
                "half-life must be positive, got {half_life}"
            )));
        }
        Ok(Self {
            v_max,
            v_min,
            half_life,
        })
    }

    pub fn constant(value: f64) -> Result<Self, QError> {
        Self::new(value, value, 1.0)
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    pub fn with_half_life(self, half_life: f64) -> Result<Self, QError> {
        Self::new(self.v_max, self.v_min, half_life)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.v_min + (self.v_max - self.v_min) * (-t / self.half_life).exp2()
    }
}

/// Discount factor plus the two decay schedules driving a run. The
/// exploration schedule yields the Boltzmann temperature, or ε when the
/// engine runs ε-greedy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnParams {
    pub gamma: f64,
    pub alpha: DecaySchedule,
    pub temperature: DecaySchedule,
}

impl LearnParams {
    pub fn new(gamma: f64, alpha: DecaySchedule, temperature: DecaySchedule) -> Result<Self, QError> {
        check_gamma(gamma)?;
        check_alpha(alpha.v_max())?;
        Ok(Self {
            gamma,
            alpha,
            temperature,
        })
    }
}

impl Default for LearnParams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: DecaySchedule::new(0.9, 0.01, 50.0).unwrap(),
            temperature: DecaySchedule::new(1.0, 0.01, 50.0).unwrap(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), QError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(QError::Alpha(alpha))
    }
}

fn check_gamma(gamma: f64) -> Result<(), QError> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(QError::Gamma(gamma))
    }
}

/// One transition `(s_t, a_t, r_t, s_{t+1})` on state indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: usize,
    pub action: Action,
    pub reward: f64,
    pub next_state: usize,
}

pub type QRow = [f64; Action::COUNT];

/// Dense action-value table, one row of four values per state.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    rows: Vec<QRow>,
}

impl QTable {
    pub fn new(num_states: usize) -> Self {
        Self {
            rows: vec![[0.0; Action::COUNT]; num_states],
        }
    }

    pub fn from_rows(rows: Vec<QRow>) -> Self {
        Self { rows }
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[QRow] {
        &self.rows
    }

    fn check_state(&self, index: usize) -> Result<(), QError> {
        if index < self.rows.len() {
            Ok(())
        } else {
            Err(QError::State {
                index,
                num_states: self.rows.len(),
            })
        }
    }

    pub fn row(&self, state: usize) -> Result<&QRow, QError> {
        self.check_state(state)?;
        Ok(&self.rows[state])
    }

    pub fn get(&self, state: usize, action: Action) -> f64 {
        self.rows[state][action.index()]
    }

    pub fn set(&mut self, state: usize, action: Action, value: f64) {
        self.rows[state][action.index()] = value;
    }

    pub fn max_value(&self, state: usize) -> f64 {
        self.rows[state].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reset(&mut self) {
        self.rows.iter_mut().for_each(|r| *r = [0.0; Action::COUNT]);
    }

    /// Applies `Q(s,a) += α [r + γ max_a' Q(s',a') - Q(s,a)]` and returns the
    /// new `Q(s,a)`. The max is read before the write.
    pub fn update(&mut self, exp: &Experience, alpha: f64, gamma: f64) -> Result<f64, QError> {
        check_alpha(alpha)?;
        check_gamma(gamma)?;
        self.check_state(exp.state)?;
        self.check_state(exp.next_state)?;
        if !exp.reward.is_finite() {
            return Err(QError::Reward(exp.reward));
        }
        let target = exp.reward + gamma * self.max_value(exp.next_state);
        let current = self.get(exp.state, exp.action);
        let updated = current + alpha * (target - current);
        self.set(exp.state, exp.action, updated);
        Ok(updated)
    }

    pub fn boltzmann_probs(&self, state: usize, temperature: f64) -> Result<QRow, QError> {
        boltzmann_probs(self.row(state)?, temperature)
    }

    pub fn greedy_action(&self, state: usize) -> Action {
        greedy_action(&self.rows[state])
    }

    pub fn epsilon_greedy_probs(&self, state: usize, epsilon: f64) -> Result<QRow, QError> {
        epsilon_greedy_probs(self.row(state)?, epsilon)
    }

    /// Writes `state,left,right,up,down` rows with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["state", "left", "right", "up", "down"])?;
        for (s, row) in self.rows.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, String> {
        let mut rows = Vec::new();
        for (i, rec) in csv::Reader::from_reader(reader).records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let parse = |k: usize| -> Result<f64, String> {
                rec.get(k)
                    .ok_or_else(|| format!("row {i}: missing column {k}"))?
                    .parse::<f64>()
                    .map_err(|e| format!("row {i}: {e}"))
            };
            let state: usize = rec
                .get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("row {i}: bad state index"))?;
            if state != i {
                return Err(format!("row {i}: state index {state} out of order"));
            }
            rows.push([parse(1)?, parse(2)?, parse(3)?, parse(4)?]);
        }
        Ok(Self { rows })
    }
}

/// Softmax of `row / temperature`, computed after subtracting the row max.
pub fn boltzmann_probs(row: &QRow, temperature: f64) -> Result<QRow, QError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(QError::Temperature(temperature));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = row.map(|q| ((q - max) / temperature).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Argmax with ties broken toward the lowest action index.
pub fn greedy_action(row: &QRow) -> Action {
    let mut best = 0;
    for i in 1..Action::COUNT {
        if row[i] > row[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub fn epsilon_greedy_probs(row: &QRow, epsilon: f64) -> Result<QRow, QError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(QError::Epsilon(epsilon));
    }
    let share = epsilon / Action::COUNT as f64;
    let mut out = [share; Action::COUNT];
    out[greedy_action(row).index()] += 1.0 - epsilon;
    Ok(out)
}

/// Inverse-CDF draw over actions in their fixed order. Consumes exactly one
/// `f64` from `rng`.
pub fn sample_action<R: Rng + ?Sized>(probs: &QRow, rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::ALL[i];
        }
    }
    // Rounding left `acc` just below 1: fall back to the last action with mass.
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(Action::COUNT - 1);
    Action::ALL[last]
}
