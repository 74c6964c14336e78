//! CGM glucose series: representation, chronological splitting, z-score
//! normalization and sliding-window sample extraction.

mod csv_io;
mod synth;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csv_io::{read_csv, write_csv};
pub use synth::{generate_synth_cohort, SynthCohortSpec};

/// Upper bound (exclusive) for a plausible sensor reading in mg/dL.
pub const MAX_READING_MGDL: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum TimeseriesError {
    #[error("reading {value} at index {index} is outside (0, {MAX_READING_MGDL}) mg/dL")]
    ReadingOutOfRange { index: usize, value: f64 },
    #[error("sampling interval must be positive")]
    ZeroInterval,
    #[error("series of {len} readings is too short (need at least {min})")]
    TooShort { len: usize, min: usize },
    #[error("split fractions must each be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("need at least 2 present readings to fit normalization, got {0}")]
    TooFewReadings(usize),
    #[error("present readings have zero variance")]
    ZeroVariance,
    #[error("invalid normalization stats (mean {mean}, std {std})")]
    BadStats { mean: f64, std: f64 },
    #[error("invalid synthetic cohort spec: {0}")]
    BadSynthSpec(String),
    #[error("synthetic calibration failed: pooled mean {mean:.2}, sd {sd:.2}")]
    CalibrationFailed { mean: f64, sd: f64 },
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    CsvReader(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A uniformly sampled CGM trace. Index `i` sits at
/// `start_time + i * interval_minutes`; gaps are `None`, never skipped indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSeries {
    patient_id: String,
    start_time: DateTime<Utc>,
    interval_minutes: u32,
    values: Vec<Option<f64>>,
}

impl GlucoseSeries {
    pub fn new(
        patient_id: impl Into<String>,
        start_time: DateTime<Utc>,
        interval_minutes: u32,
        values: Vec<Option<f64>>,
    ) -> Result<Self, TimeseriesError> {
        if interval_minutes == 0 {
            return Err(TimeseriesError::ZeroInterval);
        }
        for (index, v) in values.iter().enumerate() {
            if let Some(v) = *v {
                if !(v.is_finite() && v > 0.0 && v < MAX_READING_MGDL) {
                    return Err(TimeseriesError::ReadingOutOfRange { index, value: v });
                }
            }
        }
        Ok(Self {
            patient_id: patient_id.into(),
            start_time,
            interval_minutes,
            values,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time_at(&self, index: usize) -> DateTime<Utc> {
        self.start_time + Duration::minutes(index as i64 * i64::from(self.interval_minutes))
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Sub-series over `range`, keeping the time grid aligned.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            patient_id: self.patient_id.clone(),
            start_time: self.time_at(range.start),
            interval_minutes: self.interval_minutes,
            values: self.values[range].to_vec(),
        }
    }
}

/// Train / validation / test fractions for [`split_by_time`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Chronological train/val/test split. Boundaries fall at
/// `floor(len * cumulative_fraction)`; the test part takes the remainder.
pub fn split_by_time(
    series: &GlucoseSeries,
    fractions: SplitFractions,
) -> Result<(GlucoseSeries, GlucoseSeries, GlucoseSeries), TimeseriesError> {
    let SplitFractions { train, val, test } = fractions;
    let positive = [train, val, test].iter().all(|f| f.is_finite() && *f > 0.0);
    if !positive || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(TimeseriesError::BadFractions((train, val, test)));
    }
    let len = series.len();
    if len < 3 {
        return Err(TimeseriesError::TooShort { len, min: 3 });
    }
    let (b1, b2) = split_boundaries(len, train, val);
    Ok((
        series.slice(0..b1),
        series.slice(b1..b2),
        series.slice(b2..len),
    ))
}

fn split_boundaries(len: usize, train: f64, val: f64) -> (usize, usize) {
    // The epsilon absorbs representation error in products like 10 * 0.7.
    let cut = |cum: f64| ((len as f64 * cum + 1e-9).floor() as usize).min(len);
    let b1 = cut(train);
    let b2 = cut(train + val).max(b1);
    (b1, b2)
}

/// Z-score statistics over present readings, population divisor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self, TimeseriesError> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(TimeseriesError::BadStats { mean, std });
        }
        Ok(Self { mean, std })
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn fit_norm(train: &GlucoseSeries) -> Result<NormStats, TimeseriesError> {
    fit_norm_pooled(std::slice::from_ref(train))
}

/// Fits one set of stats over the present readings of every series.
pub fn fit_norm_pooled(series: &[GlucoseSeries]) -> Result<NormStats, TimeseriesError> {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in series.iter().flat_map(GlucoseSeries::present) {
        n += 1;
        sum += v;
    }
    if n < 2 {
        return Err(TimeseriesError::TooFewReadings(n));
    }
    let mean = sum / n as f64;
    let var = series
        .iter()
        .flat_map(GlucoseSeries::present)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if var <= 0.0 {
        return Err(TimeseriesError::ZeroVariance);
    }
    NormStats::new(mean, var.sqrt())
}

/// Normalizes present readings; missing readings become 0.0.
pub fn normalize(series: &GlucoseSeries, stats: &NormStats) -> Vec<f64> {
    series
        .values()
        .iter()
        .map(|v| v.map_or(0.0, |v| stats.normalize_value(v)))
        .collect()
}

pub fn denormalize(value: f64, stats: &NormStats) -> f64 {
    stats.denormalize(value)
}

/// One supervised example: `input_len` normalized readings and the normalized
/// reading `horizon` steps after the last input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: f64,
    pub patient_id: String,
    pub target_index: usize,
}

/// Stride-1 sliding windows. A window starting at `i` targets index
/// `i + input_len - 1 + horizon` and is kept only if that raw reading is
/// present. Series shorter than `input_len + horizon` yield no samples.
pub fn windowize(
    norm: &[f64],
    raw: &GlucoseSeries,
    input_len: usize,
    horizon: usize,
) -> Vec<Sample> {
    assert!(input_len >= 1 && horizon >= 1, "input_len and horizon must be >= 1");
    assert_eq!(norm.len(), raw.len(), "normalized and raw series differ in length");
    let span = input_len - 1 + horizon;
    if raw.len() <= span {
        return Vec::new();
    }
    (0..raw.len() - span)
        .filter(|&i| raw.values()[i + span].is_some())
        .map(|i| Sample {
            input: norm[i..i + input_len].to_vec(),
            target: norm[i + span],
            patient_id: raw.patient_id().to_owned(),
            target_index: i + span,
        })
        .collect()
}
