//! Config-driven experiment runs and their on-disk artifacts.

mod config;
mod output;
mod run;

pub use config::{
    CoateLourySpec, ConstraintsConfig, Construction, ContinuousSpec, DemoKind, DemoSection,
    ExperimentConfig, ExperimentSection, FeasibilitySection, OutputConfig,
};
pub use output::{read_metrics_csv, render_figure, MetricsRow, PanelGaps, METRICS_HEADER};
pub use run::{
    evaluate_policies, generate_samples, method_mode, metrics_rows, prepare, read_policies,
    render_report, run_demo, run_experiment, run_feasibility, train_methods, MethodResult,
    Prepared, StoredPolicy,
};

use thiserror::Error;

use crate::manifolds::ManifoldError;
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure in {method}: {source}")]
    Solver {
        method: String,
        #[source]
        source: SolverError,
    },
    #[error("infeasible construction: {0}")]
    Infeasible(#[from] ManifoldError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl ExperimentError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Solver { .. } => 3,
            ExperimentError::Infeasible(_) => 4,
            ExperimentError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
