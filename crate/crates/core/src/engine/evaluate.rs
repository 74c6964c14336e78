//! Test-split evaluation and the seen/unseen cross-cohort matrix.

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::cohort::{NormScope, PreparedCohort, WindowSpec};
use crate::learner::{self, LearnerSpec, ParamVector};
use crate::metrics::{evaluate, summarize, GPenaltySpec, MetricsError, MetricsReport, PredictionSet};
use crate::timeseries::{normalize, windowize, GlucoseSeries, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub window: WindowSpec,
    pub penalty: GPenaltySpec,
    /// Largest lag searched by the time-lag metric, in readings.
    pub max_lag: usize,
    /// Also search lags where the predictions lead the readings.
    #[serde(default)]
    pub negative_lags: bool,
}

impl EvalOptions {
    pub fn new(window: WindowSpec) -> Self {
        Self {
            window,
            penalty: GPenaltySpec::default(),
            max_lag: window.input_len,
            negative_lags: false,
        }
    }
}

/// A population model together with the cohort it was trained on.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub train_cohort: String,
    pub spec: LearnerSpec,
    pub params: ParamVector,
    /// Normalization fitted on the training cohort.
    pub stats: NormStats,
}

#[derive(Debug, Clone)]
pub struct TestPatient {
    pub patient_id: String,
    pub raw: GlucoseSeries,
    /// The patient's own training-split stats, used under per-patient scope.
    pub own_stats: NormStats,
}

#[derive(Debug, Clone)]
pub struct TestCohort {
    pub name: String,
    pub scope: NormScope,
    pub patients: Vec<TestPatient>,
}

impl From<&PreparedCohort> for TestCohort {
    fn from(c: &PreparedCohort) -> Self {
        Self {
            name: c.name.clone(),
            scope: c.scope,
            patients: c
                .patients
                .iter()
                .map(|p| TestPatient {
                    patient_id: p.patient_id.clone(),
                    raw: p.test_raw.clone(),
                    own_stats: p.stats,
                })
                .collect(),
        }
    }
}

/// Denormalized predictions for every valid window of `raw`, in target order.
pub fn predictions(
    spec: &LearnerSpec,
    params: &ParamVector,
    raw: &GlucoseSeries,
    stats: &NormStats,
    window: WindowSpec,
) -> Result<Option<PredictionSet>, EngineError> {
    let samples = windowize(&normalize(raw, stats), raw, window.input_len, window.horizon);
    if samples.is_empty() {
        return Ok(None);
    }
    let preds = learner::predict_batch(spec, params, &samples)?;
    let actual = samples
        .iter()
        .map(|s| raw.values()[s.target_index].expect("targets are present readings"))
        .collect();
    let predicted = preds.iter().map(|&p| stats.denormalize(p)).collect();
    Ok(Some(PredictionSet::new(actual, predicted)?))
}

/// All five metrics on one patient's series. `Ok(None)` when the series is
/// too short to yield enough windows.
pub fn evaluate_patient(
    spec: &LearnerSpec,
    params: &ParamVector,
    raw: &GlucoseSeries,
    stats: &NormStats,
    opts: &EvalOptions,
) -> Result<Option<MetricsReport>, EngineError> {
    let Some(ps) = predictions(spec, params, raw, stats, opts.window)? else {
        return Ok(None);
    };
    match evaluate(&ps, &opts.penalty, raw.interval_minutes(), opts.max_lag, opts.negative_lags) {
        Ok(r) => Ok(Some(r)),
        Err(MetricsError::TooShort { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patient_id: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalCell {
    pub train_cohort: String,
    pub test_cohort: String,
    /// Diagonal cell: the test patients took part in training.
    pub seen: bool,
    pub patients: Vec<PatientReport>,
    /// Mean and SD over patients; `None` when no patient could be scored.
    pub mean: Option<MetricsReport>,
    pub sd: Option<MetricsReport>,
}

/// Rows follow `models`, columns follow `cohorts`. Each test patient is
/// normalized with the model's training stats (or their own, under
/// per-patient scope), and metrics are computed per patient on mg/dL values.
pub fn cross_evaluate(
    models: &[TrainedModel],
    cohorts: &[TestCohort],
    opts: &EvalOptions,
) -> Result<Vec<Vec<CrossEvalCell>>, EngineError> {
    models
        .iter()
        .map(|m| {
            cohorts
                .iter()
                .map(|c| {
                    let mut patients = Vec::new();
                    for p in &c.patients {
                        let stats = match c.scope {
                            NormScope::Pooled => &m.stats,
                            NormScope::PerPatient => &p.own_stats,
                        };
                        if let Some(report) = evaluate_patient(&m.spec, &m.params, &p.raw, stats, opts)? {
                            patients.push(PatientReport {
                                patient_id: p.patient_id.clone(),
                                report,
                            });
                        }
                    }
                    let reports: Vec<MetricsReport> = patients.iter().map(|p| p.report).collect();
                    let summary = summarize(&reports);
                    Ok(CrossEvalCell {
                        train_cohort: m.train_cohort.clone(),
                        test_cohort: c.name.clone(),
                        seen: m.train_cohort == c.name,
                        patients,
                        mean: summary.map(|s| s.0),
                        sd: summary.map(|s| s.1),
                    })
                })
                .collect()
        })
        .collect()
}
