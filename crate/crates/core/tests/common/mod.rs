//! Independent reference computations shared by the oracle tests and the
//! acceptance suite.

#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use gluadfl::learner::{self, LearnerSpec, ParamVector};
use gluadfl::metrics::PredictionSet;
use gluadfl::timeseries::{GlucoseSeries, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Straight-line LSTM recurrence with separate gate matrices.
pub fn reference_lstm(h: usize, params: &[f64], input: &[f64]) -> f64 {
    let cols = 1 + h;
    let w_end = 4 * h * cols;
    let gate = |g: usize| {
        let rows: Vec<&[f64]> = (0..h)
            .map(|r| &params[(g * h + r) * cols..(g * h + r + 1) * cols])
            .collect();
        let bias = &params[w_end + g * h..w_end + (g + 1) * h];
        (rows, bias)
    };
    let gates: Vec<_> = (0..4).map(gate).collect();
    let head_w = &params[w_end + 4 * h..w_end + 5 * h];
    let head_b = params[w_end + 5 * h];

    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    for &x in input {
        let pre = |g: usize, k: usize| {
            let (rows, bias) = &gates[g];
            let row = rows[k];
            let mut z = row[0] * x + bias[k];
            for j in 0..h {
                z += row[1 + j] * hidden[j];
            }
            z
        };
        let mut next_h = vec![0.0; h];
        let mut next_c = vec![0.0; h];
        for k in 0..h {
            let i = sigmoid(pre(0, k));
            let f = sigmoid(pre(1, k));
            let g = pre(2, k).tanh();
            let o = sigmoid(pre(3, k));
            next_c[k] = f * cell[k] + i * g;
            next_h[k] = o * next_c[k].tanh();
        }
        hidden = next_h;
        cell = next_c;
    }
    head_w.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + head_b
}

pub fn random_batch(rng: &mut ChaCha8Rng, input_len: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            input: (0..input_len).map(|_| rng.random_range(-2.0..2.0)).collect(),
            target: rng.random_range(-2.0..2.0),
            patient_id: "p".into(),
            target_index: i,
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central differences of the batch loss with step `eps` on every coordinate;
/// relative error is measured against the finite difference where
/// `|FD| > 1e-8`. Per sample, `(t - y+)^2 - (t - y-)^2` is evaluated as
/// `(y- - y+)(2t - y+ - y-)`, which equals the loss difference exactly in real
/// arithmetic but does not subtract two nearly equal losses.
pub fn finite_difference_check(spec: &LearnerSpec, data_seed: u64, batch: usize, eps: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let params = learner::init_params(spec);
    let samples = random_batch(&mut rng, spec.input_len, batch);
    let analytic = learner::grad(spec, &params, &samples).unwrap();
    let mut values = params.into_inner();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    let predict = |v: &[f64]| learner::predict_batch(spec, &ParamVector::new(v.to_vec()).unwrap(), &samples).unwrap();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let up = predict(&values);
        values[i] = orig - eps;
        let down = predict(&values);
        values[i] = orig;
        let diff: f64 = samples
            .iter()
            .zip(up.iter().zip(&down))
            .map(|(s, (u, d))| (d - u) * (2.0 * s.target - u - d))
            .sum();
        let fd = diff / samples.len() as f64 / (2.0 * eps);
        if fd.abs() > 1e-8 {
            out.max_rel_err = out.max_rel_err.max((analytic[i] - fd).abs() / fd.abs());
            out.checked += 1;
        }
    }
    out
}

/// Random series of random length with random MISSING runs.
pub fn random_gapped_series(rng: &mut ChaCha8Rng) -> GlucoseSeries {
    let len = rng.random_range(0..120);
    let gap_p = rng.random_range(0.0..0.4);
    let mut values = Vec::with_capacity(len);
    let mut in_gap = false;
    for _ in 0..len {
        in_gap = if in_gap { rng.random_bool(0.6) } else { rng.random_bool(gap_p * 0.5) };
        values.push((!in_gap).then(|| rng.random_range(40.0..400.0)));
    }
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    GlucoseSeries::new("p", t0, 5, values).unwrap()
}

/// Every `(start, target)` pair with a full input window, a target `horizon`
/// steps past the last input, and a present target reading.
pub fn enumerate_windows(values: &[Option<f64>], input_len: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 0..values.len() {
        for (target, v) in values.iter().enumerate() {
            let last = start + input_len - 1;
            if target == last + horizon && v.is_some() {
                out.push((start, target));
            }
        }
    }
    out
}

/// Split lengths by searching for the largest prefix lengths whose share of
/// the series does not exceed each cumulative fraction.
pub fn enumerate_split(len: usize, train: f64, val: f64) -> (usize, usize, usize) {
    // Integer arithmetic on fractions given in hundredths.
    let tr = (train * 100.0).round() as usize;
    let va = (val * 100.0).round() as usize;
    let largest = |pct: usize| (0..=len).filter(|k| k * 100 <= len * pct).max().unwrap();
    let b1 = largest(tr);
    let b2 = largest(tr + va);
    (b1, b2 - b1, len - b2)
}

pub fn brute_rmse(ps: &PredictionSet) -> f64 {
    let n = ps.len() as f64;
    let mut sse = 0.0;
    for i in 0..ps.len() {
        sse += (ps.actual()[i] - ps.predicted()[i]).powi(2);
    }
    (sse / n).sqrt()
}

pub fn brute_mae(ps: &PredictionSet) -> f64 {
    let mut acc = 0.0;
    for i in 0..ps.len() {
        acc += (ps.actual()[i] - ps.predicted()[i]).abs();
    }
    acc / ps.len() as f64
}

pub fn brute_mard(ps: &PredictionSet) -> f64 {
    let mut acc = 0.0;
    for i in 0..ps.len() {
        acc += 100.0 * (ps.actual()[i] - ps.predicted()[i]).abs() / ps.actual()[i];
    }
    acc / ps.len() as f64
}

pub fn random_prediction_set(rng: &mut ChaCha8Rng) -> PredictionSet {
    let n = rng.random_range(1..200);
    let actual: Vec<f64> = (0..n).map(|_| rng.random_range(40.0..400.0)).collect();
    let predicted = actual.iter().map(|a| a + rng.random_range(-80.0..80.0)).collect();
    PredictionSet::new(actual, predicted).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// White-noise signal and a copy delayed by `k` readings, affinely rescaled.
pub fn shifted_pair(rng: &mut ChaCha8Rng, len: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let actual: Vec<f64> = (0..len).map(|_| rng.random_range(60.0..300.0)).collect();
    let predicted = (0..len)
        .map(|i| if i >= k { 0.8 * actual[i - k] + 20.0 } else { rng.random_range(60.0..300.0) })
        .collect();
    (actual, predicted)
}
