//! Turns raw cohorts into per-patient training, validation and test data.

use serde::{Deserialize, Serialize};

use crate::timeseries::{
    fit_norm, fit_norm_pooled, normalize, split_by_time, windowize, GlucoseSeries, NormStats, Sample,
    SplitFractions, TimeseriesError,
};

/// Input window length and prediction horizon, in readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    /// Two hours of 5-minute history, 30 minutes ahead.
    fn default() -> Self {
        Self {
            input_len: 12,
            horizon: 6,
        }
    }
}

/// Which readings the z-score statistics are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One set of stats over every patient's training split.
    #[default]
    Pooled,
    /// Each patient normalized by their own training split.
    PerPatient,
}

#[derive(Debug, Clone)]
pub struct PatientData {
    pub patient_id: String,
    pub stats: NormStats,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_raw: GlucoseSeries,
}

#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub name: String,
    pub scope: NormScope,
    /// Pooled training-split stats (used for every patient under
    /// [`NormScope::Pooled`]).
    pub stats: NormStats,
    pub window: WindowSpec,
    pub interval_minutes: u32,
    pub patients: Vec<PatientData>,
}

/// Splits each series by time, fits normalization on training splits only and
/// windowizes the training and validation parts.
pub fn prepare_cohort(
    name: impl Into<String>,
    series: &[GlucoseSeries],
    fractions: SplitFractions,
    window: WindowSpec,
    scope: NormScope,
) -> Result<PreparedCohort, TimeseriesError> {
    let splits = series
        .iter()
        .map(|s| split_by_time(s, fractions))
        .collect::<Result<Vec<_>, _>>()?;
    let train_parts: Vec<GlucoseSeries> = splits.iter().map(|(tr, _, _)| tr.clone()).collect();
    let pooled = fit_norm_pooled(&train_parts)?;
    let interval_minutes = series.first().map_or(5, GlucoseSeries::interval_minutes);

    let patients = splits
        .into_iter()
        .map(|(train, val, test)| {
            let stats = match scope {
                NormScope::Pooled => pooled,
                NormScope::PerPatient => fit_norm(&train)?,
            };
            let windows = |s: &GlucoseSeries| windowize(&normalize(s, &stats), s, window.input_len, window.horizon);
            Ok(PatientData {
                patient_id: train.patient_id().to_owned(),
                stats,
                train: windows(&train),
                val: windows(&val),
                test_raw: test,
            })
        })
        .collect::<Result<Vec<_>, TimeseriesError>>()?;

    Ok(PreparedCohort {
        name: name.into(),
        scope,
        stats: pooled,
        window,
        interval_minutes,
        patients,
    })
}

impl PreparedCohort {
    pub fn train_sample_count(&self) -> usize {
        self.patients.iter().map(|p| p.train.len()).sum()
    }
}
