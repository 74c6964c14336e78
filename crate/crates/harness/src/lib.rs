//! Experiment orchestration for the gluadfl simulator: TOML plans, grid
//! execution, hyperparameter selection, cross-cohort evaluation and the
//! report, summary and manifest artifacts.

use thiserror::Error;

pub mod manifest;
pub mod plan;
pub mod report;
pub mod runner;

pub use manifest::Manifest;
pub use plan::{Cell, ExperimentPlan, GroupKey, Method};
pub use report::{compare_report, write_summary, SummaryRow};
pub use runner::{evaluate_checkpoint, load_cohorts, run_plan, select_hyperparameters, RunOptions, RunSummary, Selection};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] gluadfl::engine::EngineError),
    #[error(transparent)]
    Timeseries(#[from] gluadfl::timeseries::TimeseriesError),
    #[error(transparent)]
    Learner(#[from] gluadfl::learner::LearnerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl HarnessError {
    /// Process exit code: 2 for invalid input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}
