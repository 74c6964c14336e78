//! Federated training: the asynchronous decentralized rounds, the FedAvg and
//! pooled-data baselines, personalization and evaluation.
//!
//! All randomness is drawn from streams keyed by `(seed, round, node)`, and
//! every round reads only the previous round's parameters, so results do not
//! depend on the order (or thread) in which nodes are processed.

mod baselines;
mod checkpoint;
mod evaluate;
mod gluadfl;
mod personalize;

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PreparedCohort;
use crate::learner::{self, LearnerError, LearnerSpec, ParamVector};
use crate::metrics::MetricsError;
use crate::rng::{derive_seed, stream, Purpose};
use crate::timeseries::{NormStats, Sample, TimeseriesError};
use crate::topology::{TopologyError, TopologySpec};

pub use baselines::{run_fedavg, run_pooled_supervised};
pub use checkpoint::EngineCheckpoint;
pub use evaluate::{
    cross_evaluate, evaluate_patient, predictions, CrossEvalCell, EvalOptions, PatientReport, TestCohort,
    TestPatient, TrainedModel,
};
pub use gluadfl::{aggregate_neighbors, run_gluadfl, run_gluadfl_with_order, GluadflSim};
pub use personalize::{personalize, FineTune};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("node {node} has no training samples")]
    NoTrainingData { node: usize },
    #[error("diverged at round {round}, node {node}")]
    Diverged { round: usize, node: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Timeseries(#[from] TimeseriesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One participant: its current parameters and private data.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub patient_id: String,
    pub params: ParamVector,
    pub train_samples: Vec<Sample>,
    pub val_samples: Vec<Sample>,
    /// Stats the samples were normalized with; converts errors to mg/dL.
    pub stats: NormStats,
    pub batch_rng_seed: u64,
}

/// One node per patient. Initial parameters and mini-batch streams are
/// derived from `seed` and the node id.
pub fn build_nodes(cohort: &PreparedCohort, learner: &LearnerSpec, seed: u64) -> Vec<NodeState> {
    cohort
        .patients
        .iter()
        .enumerate()
        .map(|(node_id, p)| {
            let init_seed = derive_seed(seed, Purpose::Init, learner.init_seed, node_id as u64);
            NodeState {
                node_id,
                patient_id: p.patient_id.clone(),
                params: learner::init_params(&learner.with_init_seed(init_seed)),
                train_samples: p.train.clone(),
                val_samples: p.val.clone(),
                stats: p.stats,
                batch_rng_seed: derive_seed(seed, Purpose::Batch, 0, node_id as u64),
            }
        })
        .collect()
}

/// Per-round participation: exactly `round(ratio * n)` nodes sit out each
/// round, chosen uniformly from the round's stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivitySchedule {
    n_nodes: usize,
    inactive_ratio: f64,
    seed: u64,
}

impl ActivitySchedule {
    pub fn new(n_nodes: usize, inactive_ratio: f64, seed: u64) -> Result<Self, EngineError> {
        if !(0.0..1.0).contains(&inactive_ratio) {
            return Err(EngineError::Config(format!(
                "inactive ratio must be in [0, 1), got {inactive_ratio}"
            )));
        }
        Ok(Self {
            n_nodes,
            inactive_ratio,
            seed,
        })
    }

    pub fn inactive_count(&self) -> usize {
        (self.inactive_ratio * self.n_nodes as f64).round() as usize
    }

    pub fn mask(&self, t: usize) -> Vec<bool> {
        let mut active = vec![true; self.n_nodes];
        let k = self.inactive_count();
        if k > 0 {
            let mut rng = stream(self.seed, Purpose::Activity, t as u64, 0);
            for i in index::sample(&mut rng, self.n_nodes, k) {
                active[i] = false;
            }
        }
        active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub topology: TopologySpec,
    pub learner: LearnerSpec,
    pub inactive_ratio: f64,
    /// Drives the activity schedule and random graphs.
    pub seed: u64,
    pub batch_size: usize,
    pub local_steps: usize,
    /// Evaluate the local gradient at the aggregated parameters instead of
    /// the node's pre-aggregation parameters.
    pub grad_at_aggregate: bool,
    pub eval_every: usize,
    pub clip_norm: Option<f64>,
    /// FedAvg only: weight client models by training-sample count.
    pub weight_by_samples: bool,
}

impl RunConfig {
    pub fn new(learner: LearnerSpec, topology: TopologySpec) -> Self {
        Self {
            rounds: 500,
            learning_rate: 1e-3,
            topology,
            learner,
            inactive_ratio: 0.0,
            seed: 0,
            batch_size: 64,
            local_steps: 1,
            grad_at_aggregate: false,
            eval_every: 10,
            clip_norm: None,
            weight_by_samples: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.into()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        self.validate_training()
    }

    fn validate_training(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.local_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, local_steps and eval_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.inactive_ratio) {
            return bad("inactive_ratio must be in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        self.learner.validate()?;
        Ok(())
    }

    fn is_eval_round(&self, t: usize) -> bool {
        t == 0 || t.is_multiple_of(self.eval_every) || t == self.rounds
    }
}

/// Trace row at an evaluation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub active_nodes: usize,
    /// Directed sender-to-receiver links used this round.
    pub links: usize,
    /// Mean local mini-batch loss over active nodes (normalized units).
    pub mean_batch_loss: Option<f64>,
    /// Validation RMSE of the population model, mg/dL, pooled over nodes.
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn final_val_rmse(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_rmse)
    }

    /// CSV with header `t,topology,rho,seed,val_rmse`.
    pub fn write_csv<W: Write>(&self, writer: W, topology: &str, rho: f64, seed: u64) -> Result<(), EngineError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "topology", "rho", "seed", "val_rmse"])
            .map_err(std::io::Error::other)?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                topology.to_owned(),
                rho.to_string(),
                seed.to_string(),
                format!("{:.6}", r.val_rmse),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub population: ParamVector,
    pub trace: RunTrace,
    pub nodes: Vec<NodeState>,
}

fn check_nodes(nodes: &[NodeState], config: &RunConfig, min_nodes: usize) -> Result<(), EngineError> {
    if nodes.len() < min_nodes {
        return Err(EngineError::Config(format!(
            "need at least {min_nodes} nodes, got {}",
            nodes.len()
        )));
    }
    let expected = config.learner.param_count();
    for (i, n) in nodes.iter().enumerate() {
        if n.node_id != i {
            return Err(EngineError::Config(format!("node at position {i} has id {}", n.node_id)));
        }
        if n.train_samples.is_empty() {
            return Err(EngineError::NoTrainingData { node: i });
        }
        if n.params.len() != expected {
            return Err(LearnerError::ParamLength {
                expected,
                got: n.params.len(),
            }
            .into());
        }
    }
    Ok(())
}

/// Uniform mini-batch without replacement from the stream for `(round, step)`.
fn sample_batch(samples: &[Sample], batch_size: usize, seed: u64, round: usize, step: usize) -> Vec<&Sample> {
    let k = batch_size.min(samples.len());
    let mut rng = stream(seed, Purpose::Batch, round as u64, step as u64);
    index::sample(&mut rng, samples.len(), k)
        .into_iter()
        .map(|i| &samples[i])
        .collect()
}

/// `local_steps` SGD steps from `start`. With `first_grad_at`, the first
/// gradient is evaluated there instead of at `start`.
#[allow(clippy::too_many_arguments)]
fn local_sgd(
    config: &RunConfig,
    samples: &[Sample],
    batch_seed: u64,
    round: usize,
    start: ParamVector,
    first_grad_at: Option<&ParamVector>,
    batch_size: usize,
) -> Result<(ParamVector, f64), LearnerError> {
    let mut current = start;
    let mut loss_sum = 0.0;
    for step in 0..config.local_steps {
        let batch = sample_batch(samples, batch_size, batch_seed, round, step);
        let at = match first_grad_at {
            Some(p) if step == 0 => p,
            _ => &current,
        };
        let (loss, mut g) = learner::loss_and_grad(&config.learner, at, &batch)?;
        if let Some(c) = config.clip_norm {
            g.clip_norm(c);
        }
        loss_sum += loss;
        if config.learning_rate > 0.0 {
            current = learner::sgd_step(&current, &g, config.learning_rate)?;
        }
    }
    Ok((current, loss_sum / config.local_steps as f64))
}

/// Pooled validation RMSE in mg/dL over every node's validation samples.
pub fn validation_rmse(spec: &LearnerSpec, params: &ParamVector, nodes: &[NodeState]) -> Result<f64, EngineError> {
    let (mut sse, mut count) = (0.0, 0usize);
    for node in nodes {
        let preds = learner::predict_batch(spec, params, &node.val_samples)?;
        for (p, s) in preds.iter().zip(&node.val_samples) {
            let e = (p - s.target) * node.stats.std;
            sse += e * e;
        }
        count += preds.len();
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok((sse / count as f64).sqrt())
}
