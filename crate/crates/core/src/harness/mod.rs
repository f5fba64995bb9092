//! Closed-loop benchmark harness: configuration, simulation, reports.

mod config;
mod report;
mod run;
mod sim;

pub use config::{ControllerKind, DpSettings, ExperimentConfig, InitialState};
pub use report::{
    compare, read_trajectory, saving_percent, write_trajectory, Comparison, ComparisonRow,
    ConservationAudit, RunReport, SolveTimeStats, TRAJECTORY_HEADER,
};
pub use run::{
    build_controller, dp_policy, load_cycle_spec, run, run_in_memory, sweep, RunOutput, SweepParam,
};
pub use sim::{simulate, Row, SimError, Trajectory};

use thiserror::Error;

use crate::controllers::ControllerError;
use crate::cycle::CycleError;
use crate::dp::DpError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("cycle: {0}")]
    Cycle(#[from] CycleError),
    #[error("controller setup: {0}")]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dp: {0}")]
    Dp(#[from] DpError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Cycle(_) | Self::Controller(_) => 1,
            Self::Sim(_) | Self::Dp(_) | Self::Io { .. } => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
