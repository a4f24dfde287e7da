//! Multi-agent tabular Q-learning over a grid world with a shared action-value
//! table, decaying Boltzmann exploration, periodic re-exploration for moving
//! reward fields, and a line-protocol server exposing the shared table to
//! agent processes.

pub mod config;
pub mod engine;
pub mod harness;
pub mod mdp;
pub mod net;
pub mod metrics;
pub mod qlearning;
pub mod reward;
pub mod seed;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use engine::{Engine, EngineConfig, EngineError, PeriodMode, PeriodPolicy, Strategy};
pub use mdp::{Action, CellState, FireSchedule, GridSpec, RewardField};
pub use metrics::{Coverage, RunMetrics};
pub use qlearning::{DecaySchedule, Experience, LearnParams, QTable};
