//! Synthetic CGM cohorts.
//!
//! Each trace is a circadian baseline, three to five bi-exponential meal
//! excursions per day and an Ornstein-Uhlenbeck deviation, plus small sensor
//! noise. A single affine map, fitted over the pooled cohort, then pins the
//! first two moments to the requested targets before clipping to the sensor
//! range.

use chrono::{TimeZone, Utc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{GlucoseSeries, TimeseriesError};
use crate::rng::{stream, Purpose};

const READING_FLOOR: f64 = 40.0;
const READING_CEIL: f64 = 400.0;
const CALIBRATION_ROUNDS: usize = 60;
const CALIBRATION_BAND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCohortSpec {
    pub n_patients: usize,
    pub days: usize,
    pub rng_seed: u64,
    #[serde(default = "default_mean")]
    pub mean_target: f64,
    #[serde(default = "default_sd")]
    pub sd_target: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    /// Prefix for generated patient ids (`<prefix>000`, `<prefix>001`, ...).
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_mean() -> f64 {
    155.0
}
fn default_sd() -> f64 {
    58.0
}
fn default_heterogeneity() -> f64 {
    0.3
}
fn default_interval() -> u32 {
    5
}
fn default_prefix() -> String {
    "p".into()
}

impl SynthCohortSpec {
    pub fn new(n_patients: usize, days: usize, rng_seed: u64) -> Self {
        Self {
            n_patients,
            days,
            rng_seed,
            mean_target: default_mean(),
            sd_target: default_sd(),
            missing_rate: 0.0,
            heterogeneity: default_heterogeneity(),
            interval_minutes: default_interval(),
            id_prefix: default_prefix(),
        }
    }

    pub fn validate(&self) -> Result<(), TimeseriesError> {
        let bad = |m: &str| Err(TimeseriesError::BadSynthSpec(m.into()));
        if self.n_patients < 1 {
            return bad("n_patients must be >= 1");
        }
        if self.days < 1 {
            return bad("days must be >= 1");
        }
        if !(0.0..0.5).contains(&self.missing_rate) {
            return bad("missing_rate must be in [0, 0.5)");
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return bad("heterogeneity must be a non-negative number");
        }
        if !(self.mean_target > READING_FLOOR && self.mean_target < READING_CEIL) {
            return bad("mean_target must lie inside the sensor range (40, 400)");
        }
        if !(self.sd_target > 0.0 && self.sd_target.is_finite()) {
            return bad("sd_target must be positive");
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return bad("interval_minutes must divide a day");
        }
        Ok(())
    }
}

/// Per-patient physiology, jittered around cohort-wide defaults.
struct PatientParams {
    offset: f64,
    circadian_amp: f64,
    circadian_phase: f64,
    meal_amp: f64,
    rise_min: f64,
    fall_min: f64,
    ou_sd: f64,
    ou_tau_min: f64,
}

impl PatientParams {
    fn draw(rng: &mut ChaCha8Rng, heterogeneity: f64) -> Self {
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let mut jitter = |base: f64| base * (heterogeneity * std_normal.sample(rng)).exp();
        let circadian_amp = jitter(12.0);
        let meal_amp = jitter(55.0);
        let rise_min = jitter(25.0);
        let fall_min = jitter(80.0).max(rise_min * 1.5);
        let ou_sd = jitter(22.0);
        let ou_tau_min = jitter(90.0);
        Self {
            offset: 60.0 * heterogeneity * std_normal.sample(rng),
            circadian_amp,
            circadian_phase: rng.random_range(-0.5..0.5),
            meal_amp,
            rise_min,
            fall_min,
            ou_sd,
            ou_tau_min,
        }
    }
}

/// Unit-peak bi-exponential response at `t` minutes after onset.
fn meal_kernel(t: f64, rise: f64, fall: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let peak_t = (fall.ln() - rise.ln()) * rise * fall / (fall - rise);
    let shape = |t: f64| (-t / fall).exp() - (-t / rise).exp();
    shape(t) / shape(peak_t)
}

fn uncalibrated_trace(
    spec: &SynthCohortSpec,
    params: &PatientParams,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let step = f64::from(spec.interval_minutes);
    let per_day = (1440 / spec.interval_minutes) as usize;
    let len = per_day * spec.days;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let size = LogNormal::new(0.0, 0.35).unwrap();

    // Meal onsets in minutes since start.
    let anchors = [7.5, 12.5, 19.0];
    let mut meals: Vec<(f64, f64)> = Vec::new();
    for day in 0..spec.days {
        let n_meals = rng.random_range(3..=5);
        for k in 0..n_meals {
            let hour = if k < anchors.len() {
                anchors[k] + 0.75 * std_normal.sample(rng)
            } else {
                rng.random_range(9.0..22.0)
            };
            let onset = (day as f64 * 24.0 + hour) * 60.0;
            let amp = params.meal_amp * size.sample(rng) * if k < anchors.len() { 1.0 } else { 0.5 };
            meals.push((onset, amp));
        }
    }

    let phi = (-step / params.ou_tau_min).exp();
    let innov = params.ou_sd * (1.0 - phi * phi).sqrt();
    let mut ou = params.ou_sd * std_normal.sample(rng);
    let window = 8.0 * params.fall_min;
    (0..len)
        .map(|i| {
            let t = i as f64 * step;
            let day_frac = t / 1440.0;
            let circadian = params.circadian_amp
                * (2.0 * std::f64::consts::PI * (day_frac + params.circadian_phase)).sin();
            let meal: f64 = meals
                .iter()
                .filter(|(onset, _)| t >= *onset && t - onset < window)
                .map(|(onset, amp)| amp * meal_kernel(t - onset, params.rise_min, params.fall_min))
                .sum();
            ou = phi * ou + innov * std_normal.sample(rng);
            params.offset + circadian + meal + ou + 2.0 * std_normal.sample(rng)
        })
        .collect()
}

/// Marks contiguous gaps until `round(missing_rate * len)` readings are missing.
fn gap_mask(len: usize, missing_rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut missing = vec![false; len];
    let budget = (missing_rate * len as f64).round() as usize;
    let mut count = 0;
    while count < budget {
        let gap = rng.random_range(1..=36).min(budget - count);
        let start = rng.random_range(0..len);
        for m in missing.iter_mut().skip(start).take(gap) {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    missing
}

fn pooled_moments<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Generates a reproducible cohort whose pooled mean and SD land within
/// 10 mg/dL of the targets.
pub fn generate_synth_cohort(spec: &SynthCohortSpec) -> Result<Vec<GlucoseSeries>, TimeseriesError> {
    spec.validate()?;
    let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();

    let mut raw = Vec::with_capacity(spec.n_patients);
    let mut masks = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let mut rng = stream(spec.rng_seed, Purpose::Synth, 0, p as u64);
        let params = PatientParams::draw(&mut rng, spec.heterogeneity);
        raw.push(uncalibrated_trace(spec, &params, &mut rng));
        let mut gap_rng = stream(spec.rng_seed, Purpose::Synth, 1, p as u64);
        masks.push(gap_mask(raw[p].len(), spec.missing_rate, &mut gap_rng));
    }

    let present = || {
        raw.iter()
            .zip(&masks)
            .flat_map(|(r, m)| r.iter().zip(m).filter(|(_, &miss)| !miss).map(|(v, _)| v))
    };
    let (raw_mean, raw_sd) = pooled_moments(present());
    if !(raw_sd > 0.0) {
        return Err(TimeseriesError::CalibrationFailed {
            mean: raw_mean,
            sd: raw_sd,
        });
    }

    // Fixed-point refinement of the affine map so the moments hold after clipping.
    let (mut shift, mut scale) = (spec.mean_target, spec.sd_target / raw_sd);
    let map = |v: f64, shift: f64, scale: f64| {
        (shift + scale * (v - raw_mean)).clamp(READING_FLOOR, READING_CEIL)
    };
    let mut moments = (f64::NAN, f64::NAN);
    for _ in 0..CALIBRATION_ROUNDS {
        let mapped: Vec<f64> = present().map(|&v| map(v, shift, scale)).collect();
        moments = pooled_moments(mapped.iter());
        let (mean, sd) = moments;
        if (mean - spec.mean_target).abs() < 0.25 && (sd - spec.sd_target).abs() < 0.25 {
            break;
        }
        shift += spec.mean_target - mean;
        scale *= spec.sd_target / sd;
    }
    let (mean, sd) = moments;
    if (mean - spec.mean_target).abs() > CALIBRATION_BAND || (sd - spec.sd_target).abs() > CALIBRATION_BAND {
        return Err(TimeseriesError::CalibrationFailed { mean, sd });
    }

    raw.iter()
        .zip(&masks)
        .enumerate()
        .map(|(p, (r, m))| {
            let values = r
                .iter()
                .zip(m)
                .map(|(&v, &miss)| (!miss).then(|| map(v, shift, scale)))
                .collect();
            GlucoseSeries::new(
                format!("{}{:03}", spec.id_prefix, p),
                start,
                spec.interval_minutes,
                values,
            )
        })
        .collect()
}
