//! Parameter checkpoints: a versioned JSON container holding the learner spec
//! and the flat vector. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LearnerError, LearnerSpec, ParamVector};

pub const CHECKPOINT_FORMAT: &str = "gluadfl-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub spec: LearnerSpec,
    pub params: ParamVector,
}

impl ParamCheckpoint {
    pub fn new(spec: LearnerSpec, params: ParamVector) -> Result<Self, LearnerError> {
        let ckpt = Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<(), LearnerError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(LearnerError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(LearnerError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.spec.validate()?;
        if self.params.len() != self.spec.param_count() {
            return Err(LearnerError::ParamLength {
                expected: self.spec.param_count(),
                got: self.params.len(),
            });
        }
        if !self.params.is_finite() {
            return Err(LearnerError::NonFinite("checkpoint parameters"));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, spec: &LearnerSpec, params: &ParamVector) -> Result<(), LearnerError> {
    let ckpt = ParamCheckpoint::new(spec.clone(), params.clone())?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamCheckpoint, LearnerError> {
    let ckpt: ParamCheckpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    ckpt.validate()?;
    Ok(ckpt)
}
