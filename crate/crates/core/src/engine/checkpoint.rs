//! Round-level snapshots for pausing and resuming a simulation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EngineError, RunTrace};
use crate::learner::ParamVector;

const FORMAT: &str = "gluadfl-run";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineCheckpoint {
    pub format: String,
    pub version: u32,
    pub method: String,
    /// Last completed round.
    pub round: usize,
    pub node_params: Vec<ParamVector>,
    pub trace: RunTrace,
}

impl EngineCheckpoint {
    pub fn new(method: &str, round: usize, node_params: Vec<ParamVector>, trace: RunTrace) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            method: method.into(),
            round,
            node_params,
            trace,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let ckpt: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(EngineError::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.node_params.iter().any(|p| !p.is_finite()) {
            return Err(EngineError::Config("checkpoint holds non-finite parameters".into()));
        }
        Ok(ckpt)
    }
}
