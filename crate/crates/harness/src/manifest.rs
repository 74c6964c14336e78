//! `manifest.json`: what ran, with which settings, and what came out.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::plan::{Cell, ExperimentPlan, GroupKey};
use crate::runner::Selection;
use crate::HarnessError;

pub const MANIFEST_FORMAT: &str = "gluadfl-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok { final_val_rmse: f64 },
    Diverged { round: usize, node: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub cell: Cell,
    #[serde(flatten)]
    pub status: CellStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
}

impl Host {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub plan: ExperimentPlan,
    pub jobs: usize,
    pub cells: Vec<CellRecord>,
    pub selections: Vec<Selection>,
    /// Groups where no hyperparameter combination finished on every seed.
    pub unselected: Vec<GroupKey>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub wall_clock_seconds: f64,
    pub host: Host,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(HarnessError::Config(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    pub fn diverged_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Diverged { .. }))
            .count()
    }
}
