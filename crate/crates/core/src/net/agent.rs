//! An agent that moves on its own copy of the grid and delegates action
//! choice and learning to the server.

use thiserror::Error;

use crate::engine::{Observer, StepEvent};
use crate::mdp::{CellState, FireSchedule, GridSpec};
use crate::metrics::{Coverage, RunMetrics, RunRecorder};
use crate::qlearning::Experience;

use super::{Client, ClientError};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub agent_id: usize,
    /// This agent's own steps only.
    pub metrics: RunMetrics,
}

#[derive(Debug, Error)]
#[error("agent {agent_id:?} stopped after {completed} steps: {source}")]
pub struct AgentError {
    pub agent_id: Option<usize>,
    pub completed: u64,
    #[source]
    pub source: ClientError,
}

/// Registers, takes `steps` steps starting from `start(id)`, then says BYE.
///
/// Each step asks the server for a directive at the current state, applies
/// it locally, and submits the experience. The reward is read from
/// `schedule` at the agent's own step count.
pub fn run_agent(
    mut client: Client,
    grid: GridSpec,
    schedule: &FireSchedule,
    start: impl FnOnce(usize) -> CellState,
    steps: u64,
) -> Result<AgentRun, AgentError> {
    let fail = |agent_id, completed| {
        move |source| AgentError {
            agent_id,
            completed,
            source,
        }
    };
    let id = client.hello().map_err(fail(None, 0))?;
    let mut cell = start(id);
    let mut recorder = RunRecorder::new(grid.num_states(), &[grid.state_index(cell)], Coverage::States);
    for t in 0..steps {
        let state = grid.state_index(cell);
        let action = client.direct(state).map_err(fail(Some(id), t))?;
        let reward = schedule.reward_at(t, cell);
        let next = grid.step(cell, action);
        let next_state = grid.state_index(next);
        let new_q = client
            .update(&Experience {
                state,
                action,
                reward,
                next_state,
            })
            .map_err(fail(Some(id), t))?;
        // Schedule values live on the server and are not reported back.
        recorder.on_step(&StepEvent {
            step: t,
            agent: id,
            state,
            action,
            reward,
            next_state,
            alpha: f64::NAN,
            exploration: f64::NAN,
            new_q,
        });
        recorder.on_tick_end(t + 1);
        cell = next;
    }
    client.bye().map_err(fail(Some(id), steps))?;
    Ok(AgentRun {
        agent_id: id,
        metrics: recorder.finish(),
    })
}
