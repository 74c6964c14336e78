//! Linear regression over the input window: `[w_1 .. w_L | bias]`.

use std::borrow::Borrow;

use crate::timeseries::Sample;

pub(crate) fn predict(params: &[f64], input: &[f64]) -> f64 {
    let (w, bias) = params.split_at(input.len());
    bias[0] + w.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
}

pub(crate) fn loss_and_grad<S: Borrow<Sample>>(params: &[f64], batch: &[S]) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for s in batch {
        let s = s.borrow();
        let err = predict(params, &s.input) - s.target;
        loss += err * err;
        let d = 2.0 * err / n;
        for (g, x) in grad.iter_mut().zip(&s.input) {
            *g += d * x;
        }
        *grad.last_mut().expect("bias slot") += d;
    }
    (loss / n, grad)
}
