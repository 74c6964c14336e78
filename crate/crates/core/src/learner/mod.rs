//! Local prediction models stored as flat parameter vectors.
//!
//! Two learners share one interface: a single-layer LSTM with an affine head
//! on the final hidden state, and plain linear regression over the input
//! window. Both predict one normalized glucose value and train on mean
//! squared error.

mod checkpoint;
mod linear;
mod lstm;

use std::borrow::Borrow;
use std::ops::{Deref, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Purpose};
use crate::timeseries::Sample;

pub use checkpoint::{load_checkpoint, save_checkpoint, ParamCheckpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

pub const MAX_HIDDEN: usize = 512;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner spec: {0}")]
    BadSpec(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("input has length {got}, learner expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("parameter vector has length {got}, learner expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("vector lengths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Lstm,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub input_len: usize,
    /// Ignored by the linear learner.
    pub hidden_size: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl LearnerSpec {
    pub fn lstm(input_len: usize, hidden_size: usize, init_seed: u64) -> Self {
        Self {
            kind: LearnerKind::Lstm,
            input_len,
            hidden_size,
            init_seed,
            init_scale: 0.1,
        }
    }

    pub fn linear(input_len: usize, init_seed: u64) -> Self {
        Self {
            kind: LearnerKind::Linear,
            input_len,
            hidden_size: 0,
            init_seed,
            init_scale: 0.1,
        }
    }

    pub fn with_init_seed(&self, init_seed: u64) -> Self {
        Self {
            init_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.input_len == 0 {
            return Err(LearnerError::BadSpec("input_len must be >= 1".into()));
        }
        if self.kind == LearnerKind::Lstm && !(1..=MAX_HIDDEN).contains(&self.hidden_size) {
            return Err(LearnerError::BadSpec(format!(
                "hidden_size must be in 1..={MAX_HIDDEN}, got {}",
                self.hidden_size
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(LearnerError::BadSpec("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LearnerKind::Lstm => lstm::Layout::new(self.hidden_size).len(),
            LearnerKind::Linear => self.input_len + 1,
        }
    }
}

/// Flat learner parameters. Layout is fixed by the [`LearnerSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LearnerError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("parameters"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Coordinate-wise mean, summed in the order given.
    pub fn mean_of<P: Borrow<ParamVector>>(vectors: &[P]) -> Result<ParamVector, LearnerError> {
        let first = vectors.first().ok_or(LearnerError::EmptyBatch)?.borrow();
        let mut acc = vec![0.0; first.len()];
        for v in vectors {
            let v = v.borrow();
            if v.len() != acc.len() {
                return Err(LearnerError::ShapeMismatch(acc.len(), v.len()));
            }
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(ParamVector(acc))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Gradient of the batch loss, laid out like [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to `max_norm` when the L2 norm exceeds it.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm {
            let s = max_norm / norm;
            self.0.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Gradient {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Uniform(-init_scale, init_scale) entries; LSTM forget-gate biases get +1.
pub fn init_params(spec: &LearnerSpec) -> ParamVector {
    let mut rng = stream(spec.init_seed, Purpose::Init, 0, 0);
    let scale = spec.init_scale;
    let mut values: Vec<f64> = (0..spec.param_count())
        .map(|_| if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 })
        .collect();
    if spec.kind == LearnerKind::Lstm {
        let layout = lstm::Layout::new(spec.hidden_size);
        values[layout.forget_bias()].iter_mut().for_each(|b| *b += 1.0);
    }
    ParamVector(values)
}

fn check_params(spec: &LearnerSpec, params: &ParamVector) -> Result<(), LearnerError> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(LearnerError::ParamLength {
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

fn check_input(spec: &LearnerSpec, input: &[f64]) -> Result<(), LearnerError> {
    if input.len() != spec.input_len {
        return Err(LearnerError::InputLength {
            expected: spec.input_len,
            got: input.len(),
        });
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(LearnerError::NonFinite("input"));
    }
    Ok(())
}

/// Predicts the normalized target for one input window.
pub fn forward(spec: &LearnerSpec, params: &ParamVector, input: &[f64]) -> Result<f64, LearnerError> {
    check_params(spec, params)?;
    check_input(spec, input)?;
    let y = match spec.kind {
        LearnerKind::Lstm => lstm::Lstm::new(spec.hidden_size, params).predict(input),
        LearnerKind::Linear => linear::predict(params, input),
    };
    if !y.is_finite() {
        return Err(LearnerError::NonFinite("prediction"));
    }
    Ok(y)
}

/// Predictions for many inputs, reusing the forward workspace.
pub fn predict_batch<S: Borrow<Sample>>(
    spec: &LearnerSpec,
    params: &ParamVector,
    batch: &[S],
) -> Result<Vec<f64>, LearnerError> {
    check_params(spec, params)?;
    let mut out = Vec::with_capacity(batch.len());
    let net = (spec.kind == LearnerKind::Lstm).then(|| lstm::Lstm::new(spec.hidden_size, params));
    for s in batch {
        let input = &s.borrow().input;
        check_input(spec, input)?;
        let y = match &net {
            Some(net) => net.predict(input),
            None => linear::predict(params, input),
        };
        if !y.is_finite() {
            return Err(LearnerError::NonFinite("prediction"));
        }
        out.push(y);
    }
    Ok(out)
}

/// Mean squared error over the batch.
pub fn loss<S: Borrow<Sample>>(spec: &LearnerSpec, params: &ParamVector, batch: &[S]) -> Result<f64, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let preds = predict_batch(spec, params, batch)?;
    let sse: f64 = preds
        .iter()
        .zip(batch)
        .map(|(p, s)| {
            let e = s.borrow().target - p;
            e * e
        })
        .sum();
    Ok(sse / batch.len() as f64)
}

/// Batch loss and its analytic gradient in one pass.
pub fn loss_and_grad<S: Borrow<Sample>>(
    spec: &LearnerSpec,
    params: &ParamVector,
    batch: &[S],
) -> Result<(f64, Gradient), LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    check_params(spec, params)?;
    for s in batch {
        check_input(spec, &s.borrow().input)?;
    }
    let (loss, grad) = match spec.kind {
        LearnerKind::Lstm => lstm::Lstm::new(spec.hidden_size, params).loss_and_grad(batch),
        LearnerKind::Linear => linear::loss_and_grad(params, batch),
    };
    if !loss.is_finite() {
        return Err(LearnerError::NonFinite("loss"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(LearnerError::NonFinite("gradient"));
    }
    Ok((loss, Gradient(grad)))
}

pub fn grad<S: Borrow<Sample>>(spec: &LearnerSpec, params: &ParamVector, batch: &[S]) -> Result<Gradient, LearnerError> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

/// `params - learning_rate * g`.
pub fn sgd_step(params: &ParamVector, g: &Gradient, learning_rate: f64) -> Result<ParamVector, LearnerError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(LearnerError::BadLearningRate(learning_rate));
    }
    if params.len() != g.len() {
        return Err(LearnerError::ShapeMismatch(params.len(), g.len()));
    }
    Ok(ParamVector(
        params.iter().zip(g.iter()).map(|(w, g)| w - learning_rate * g).collect(),
    ))
}

/// Named slices of the LSTM parameter layout, for tools that want to inspect
/// a checkpoint.
pub fn lstm_layout(hidden_size: usize) -> Vec<(&'static str, Range<usize>)> {
    let l = lstm::Layout::new(hidden_size);
    vec![
        ("gate_weights", l.weights()),
        ("gate_bias", l.bias()),
        ("head_weights", l.head_weights()),
        ("head_bias", l.head_bias()..l.head_bias() + 1),
    ]
}
