//! Fine-tuning a population model on one node's own data.

use serde::{Deserialize, Serialize};

use super::{sample_batch, EngineError, NodeState};
use crate::learner::{self, LearnerSpec, ParamVector};
use crate::rng::{derive_seed, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTune {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

/// `steps` SGD steps on the node's training samples, starting from `start`.
pub fn personalize(
    spec: &LearnerSpec,
    start: &ParamVector,
    node: &NodeState,
    ft: &FineTune,
) -> Result<ParamVector, EngineError> {
    if ft.steps == 0 {
        return Ok(start.clone());
    }
    if node.train_samples.is_empty() {
        return Err(EngineError::NoTrainingData { node: node.node_id });
    }
    if ft.batch_size == 0 {
        return Err(EngineError::Config("fine-tune batch_size must be >= 1".into()));
    }
    let seed = derive_seed(node.batch_rng_seed, Purpose::Personalize, 0, 0);
    let mut params = start.clone();
    for step in 0..ft.steps {
        let batch = sample_batch(&node.train_samples, ft.batch_size, seed, step, 0);
        let mut g = learner::grad(spec, &params, &batch)?;
        if let Some(c) = ft.clip_norm {
            g.clip_norm(c);
        }
        params = learner::sgd_step(&params, &g, ft.learning_rate)?;
    }
    Ok(params)
}
