//! Glucose prediction metrics on denormalized (mg/dL) values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty prediction set")]
    Empty,
    #[error("actual and predicted lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("actual value {value} at index {index} is not positive")]
    NonPositiveActual { index: usize, value: f64 },
    #[error("series of length {len} too short for max lag {max_lag}")]
    TooShort { len: usize, max_lag: usize },
    #[error("zero-variance segment at lag {0}")]
    Degenerate(usize),
    #[error("invalid penalty spec: {0}")]
    BadPenalty(String),
}

/// Paired actual and predicted glucose values in mg/dL, in target order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    actual: Vec<f64>,
    predicted: Vec<f64>,
}

impl PredictionSet {
    pub fn new(actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self, MetricsError> {
        if actual.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()));
        }
        if actual.is_empty() {
            return Err(MetricsError::Empty);
        }
        for (i, (a, p)) in actual.iter().zip(&predicted).enumerate() {
            if !(a.is_finite() && p.is_finite()) {
                return Err(MetricsError::NonFinite(i));
            }
        }
        Ok(Self { actual, predicted })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, MetricsError> {
        Self::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    pub fn actual(&self) -> &[f64] {
        &self.actual
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.actual.iter().copied().zip(self.predicted.iter().copied())
    }
}

/// Weight applied to a squared error in gRMSE.
pub trait Penalty {
    fn weight(&self, actual: f64, predicted: f64) -> f64;

    /// Tag written to reports so readers know which surface was used.
    fn variant(&self) -> String;
}

/// Two-region step penalty: overestimating below `hypo_threshold` or
/// underestimating above `hyper_threshold` costs `penalty_weight` times more.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GPenaltySpec {
    pub hypo_threshold: f64,
    pub hyper_threshold: f64,
    pub penalty_weight: f64,
}

impl Default for GPenaltySpec {
    fn default() -> Self {
        Self {
            hypo_threshold: 70.0,
            hyper_threshold: 180.0,
            penalty_weight: 2.0,
        }
    }
}

impl GPenaltySpec {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.hypo_threshold < self.hyper_threshold) {
            return Err(MetricsError::BadPenalty("hypo threshold must be below hyper threshold".into()));
        }
        if !(self.penalty_weight >= 1.0 && self.penalty_weight.is_finite()) {
            return Err(MetricsError::BadPenalty("weight must be finite and >= 1".into()));
        }
        Ok(())
    }
}

impl Penalty for GPenaltySpec {
    fn weight(&self, actual: f64, predicted: f64) -> f64 {
        let over_in_hypo = predicted > actual && actual < self.hypo_threshold;
        let under_in_hyper = predicted < actual && actual > self.hyper_threshold;
        if over_in_hypo || under_in_hyper {
            self.penalty_weight
        } else {
            1.0
        }
    }

    fn variant(&self) -> String {
        format!("step{:.1}", self.penalty_weight)
    }
}

pub fn rmse(ps: &PredictionSet) -> f64 {
    let sse: f64 = ps.pairs().map(|(a, p)| (a - p) * (a - p)).sum();
    (sse / ps.len() as f64).sqrt()
}

pub fn mae(ps: &PredictionSet) -> f64 {
    ps.pairs().map(|(a, p)| (a - p).abs()).sum::<f64>() / ps.len() as f64
}

/// Mean absolute relative difference, in percent.
pub fn mard(ps: &PredictionSet) -> Result<f64, MetricsError> {
    let mut acc = 0.0;
    for (index, (a, p)) in ps.pairs().enumerate() {
        if a <= 0.0 {
            return Err(MetricsError::NonPositiveActual { index, value: a });
        }
        acc += (a - p).abs() / a;
    }
    Ok(acc / ps.len() as f64 * 100.0)
}

pub fn grmse<P: Penalty + ?Sized>(ps: &PredictionSet, penalty: &P) -> f64 {
    let sse: f64 = ps
        .pairs()
        .map(|(a, p)| penalty.weight(a, p) * ((a - p) * (a - p)))
        .sum();
    (sse / ps.len() as f64).sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| sxy / denom)
}

/// Lag, in minutes, maximizing the Pearson correlation between
/// `predicted[k..]` and `actual[..len - k]` over `k` in `0..=max_lag`.
/// Ties go to the smallest `k`.
pub fn time_lag(actual: &[f64], predicted: &[f64], interval_minutes: u32, max_lag: usize) -> Result<f64, MetricsError> {
    best_lag(actual, predicted, interval_minutes, max_lag, false)
}

/// [`time_lag`] over `k` in `-max_lag..=max_lag`. A negative lag means the
/// predictions lead the readings. Ties go to the smallest `|k|`, then to the
/// positive side.
pub fn time_lag_signed(
    actual: &[f64],
    predicted: &[f64],
    interval_minutes: u32,
    max_lag: usize,
) -> Result<f64, MetricsError> {
    best_lag(actual, predicted, interval_minutes, max_lag, true)
}

fn best_lag(
    actual: &[f64],
    predicted: &[f64],
    interval_minutes: u32,
    max_lag: usize,
    negative: bool,
) -> Result<f64, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()));
    }
    let len = actual.len();
    if len < max_lag + 2 {
        return Err(MetricsError::TooShort { len, max_lag });
    }
    let mut best = (0i64, f64::NEG_INFINITY);
    for k in 0..=max_lag {
        let mut candidates = vec![(k as i64, &predicted[k..], &actual[..len - k])];
        if negative && k > 0 {
            candidates.push((-(k as i64), &predicted[..len - k], &actual[k..]));
        }
        for (lag, p, a) in candidates {
            let r = pearson(p, a).ok_or(MetricsError::Degenerate(k))?;
            if r > best.1 {
                best = (lag, r);
            }
        }
    }
    Ok(best.0 as f64 * f64::from(interval_minutes))
}

/// All five metrics for one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mard: f64,
    pub mae: f64,
    pub grmse: f64,
    pub time_lag: f64,
    pub n_samples: usize,
}

pub fn evaluate<P: Penalty + ?Sized>(
    ps: &PredictionSet,
    penalty: &P,
    interval_minutes: u32,
    max_lag: usize,
    negative_lags: bool,
) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        rmse: rmse(ps),
        mard: mard(ps)?,
        mae: mae(ps),
        grmse: grmse(ps, penalty),
        time_lag: best_lag(ps.actual(), ps.predicted(), interval_minutes, max_lag, negative_lags)?,
        n_samples: ps.len(),
    })
}

/// Mean and population SD of each metric across reports (e.g. patients).
pub fn summarize(reports: &[MetricsReport]) -> Option<(MetricsReport, MetricsReport)> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let col = |f: fn(&MetricsReport) -> f64| {
        let mean = reports.iter().map(f).sum::<f64>() / n;
        let var = reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (rmse, mard, mae, grmse, lag) = (
        col(|r| r.rmse),
        col(|r| r.mard),
        col(|r| r.mae),
        col(|r| r.grmse),
        col(|r| r.time_lag),
    );
    let total = reports.iter().map(|r| r.n_samples).sum();
    Some((
        MetricsReport {
            rmse: rmse.0,
            mard: mard.0,
            mae: mae.0,
            grmse: grmse.0,
            time_lag: lag.0,
            n_samples: total,
        },
        MetricsReport {
            rmse: rmse.1,
            mard: mard.1,
            mae: mae.1,
            grmse: grmse.1,
            time_lag: lag.1,
            n_samples: total,
        },
    ))
}

/// `mean(SD)` with two decimals.
pub fn mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.2}({sd:.2})")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(pairs: &[(f64, f64)]) -> PredictionSet {
        PredictionSet::from_pairs(pairs).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&ps(&[(100.0, 100.0), (150.0, 150.0)])), 0.0);
        assert_eq!(rmse(&ps(&[(110.0, 100.0)])), 10.0);
        assert_eq!(rmse(&ps(&[(100.0, 110.0), (100.0, 90.0)])), 10.0);
        assert_eq!(PredictionSet::new(vec![], vec![]), Err(MetricsError::Empty));
    }

    #[test]
    fn mard_examples() {
        assert!((mard(&ps(&[(100.0, 110.0)])).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mard(&ps(&[(100.0, 100.0)])).unwrap(), 0.0);
        assert!((mard(&ps(&[(100.0, 110.0), (200.0, 210.0)])).unwrap() - 7.5).abs() < 1e-12);
        assert!(matches!(
            mard(&ps(&[(0.0, 1.0)])),
            Err(MetricsError::NonPositiveActual { .. })
        ));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&ps(&[(100.0, 100.0)])), 0.0);
        assert_eq!(mae(&ps(&[(100.0, 90.0), (100.0, 130.0)])), 20.0);
        assert_eq!(mae(&ps(&[(100.0, 87.5)])), 12.5);
    }

    #[test]
    fn grmse_examples() {
        let unit = GPenaltySpec {
            penalty_weight: 1.0,
            ..Default::default()
        };
        let set = ps(&[(60.0, 80.0), (200.0, 180.0), (120.0, 125.0)]);
        assert_eq!(grmse(&set, &unit).to_bits(), rmse(&set).to_bits());

        let pen = GPenaltySpec::default();
        assert!((grmse(&ps(&[(60.0, 80.0)]), &pen) - 800f64.sqrt()).abs() < 1e-12);
        assert!((grmse(&ps(&[(200.0, 180.0)]), &pen) - 800f64.sqrt()).abs() < 1e-12);
        // Underestimating a low and overestimating a high are not penalized.
        assert_eq!(grmse(&ps(&[(60.0, 40.0)]), &pen), 20.0);
        assert_eq!(grmse(&ps(&[(200.0, 220.0)]), &pen), 20.0);
        assert_eq!(pen.variant(), "step2.0");

        let open = GPenaltySpec {
            hypo_threshold: 0.0,
            hyper_threshold: f64::INFINITY,
            penalty_weight: 3.0,
        };
        assert_eq!(grmse(&set, &open).to_bits(), rmse(&set).to_bits());
    }

    #[test]
    fn penalty_validation() {
        assert!(GPenaltySpec::default().validate().is_ok());
        let bad = GPenaltySpec {
            penalty_weight: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GPenaltySpec {
            hypo_threshold: 200.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn wave(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 150.0 + 40.0 * (i as f64 * 0.21).sin() + 15.0 * (i as f64 * 0.053).cos())
            .collect()
    }

    #[test]
    fn time_lag_examples() {
        let actual = wave(120);
        assert_eq!(time_lag(&actual, &actual, 5, 12).unwrap(), 0.0);

        let shifted = |k: usize, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (0..actual.len()).map(|i| f(actual[i.saturating_sub(k)])).collect()
        };
        assert_eq!(time_lag(&actual, &shifted(2, &|v| v), 5, 12).unwrap(), 10.0);
        assert_eq!(time_lag(&actual, &shifted(3, &|v| 0.5 * v + 20.0), 5, 12).unwrap(), 15.0);
    }

    #[test]
    fn time_lag_errors() {
        assert!(matches!(
            time_lag(&[1.0; 5], &[1.0; 5], 5, 12),
            Err(MetricsError::TooShort { .. })
        ));
        assert!(matches!(
            time_lag(&[1.0; 20], &wave(20), 5, 3),
            Err(MetricsError::Degenerate(0))
        ));
    }

    #[test]
    fn summarize_mean_sd() {
        let r = |rmse| MetricsReport {
            rmse,
            mard: 1.0,
            mae: 1.0,
            grmse: 1.0,
            time_lag: 5.0,
            n_samples: 10,
        };
        let (mean, sd) = summarize(&[r(10.0), r(20.0)]).unwrap();
        assert_eq!((mean.rmse, sd.rmse), (15.0, 5.0));
        assert_eq!(mean.n_samples, 20);
        assert_eq!(mean_sd(mean.rmse, sd.rmse), "15.00(5.00)");
        assert!(summarize(&[]).is_none());
    }

    proptest! {
        #[test]
        fn error_metrics_are_ordered(
            pairs in prop::collection::vec((40.0f64..400.0, 1.0f64..450.0), 1..300),
            weight in 1.0f64..5.0,
        ) {
            let ps = PredictionSet::from_pairs(&pairs).unwrap();
            let penalty = GPenaltySpec { penalty_weight: weight, ..GPenaltySpec::default() };
            let (a, r, g) = (mae(&ps), rmse(&ps), grmse(&ps, &penalty));
            prop_assert!(a <= r * (1.0 + 1e-12));
            prop_assert!(r <= g);
            prop_assert!(g <= r * weight.sqrt() * (1.0 + 1e-12));
            prop_assert!(mard(&ps).unwrap() >= 0.0);
        }
    }
}
