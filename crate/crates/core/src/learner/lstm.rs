//! Single-layer LSTM over a scalar input sequence, affine head on the last
//! hidden state, backpropagation through time.
//!
//! Layout of the flat vector, `h` = hidden size, gate order (input, forget,
//! cell, output):
//!
//! ```text
//! [ W: 4h rows x (1 + h) cols, row-major | b: 4h | head_w: h | head_b: 1 ]
//! ```
//!
//! Column 0 of `W` multiplies the input reading, columns `1..=h` the previous
//! hidden state.

use std::borrow::Borrow;
use std::ops::Range;

use crate::timeseries::Sample;

use super::ParamVector;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    h: usize,
}

impl Layout {
    pub fn new(h: usize) -> Self {
        Self { h }
    }

    fn cols(&self) -> usize {
        1 + self.h
    }

    pub fn weights(&self) -> Range<usize> {
        0..4 * self.h * self.cols()
    }

    pub fn bias(&self) -> Range<usize> {
        let start = self.weights().end;
        start..start + 4 * self.h
    }

    pub fn forget_bias(&self) -> Range<usize> {
        let start = self.bias().start + self.h;
        start..start + self.h
    }

    pub fn head_weights(&self) -> Range<usize> {
        let start = self.bias().end;
        start..start + self.h
    }

    pub fn head_bias(&self) -> usize {
        self.head_weights().end
    }

    pub fn len(&self) -> usize {
        self.head_bias() + 1
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) struct Lstm<'a> {
    h: usize,
    w: &'a [f64],
    b: &'a [f64],
    head_w: &'a [f64],
    head_b: f64,
    layout: Layout,
}

/// Per-step activations kept for the backward pass.
struct Tape {
    h: usize,
    /// Per step: i, f, g, o (4h), c (h), tanh(c) (h), hidden (h).
    steps: Vec<f64>,
}

impl Tape {
    const WIDTH: usize = 7;

    fn new(h: usize, len: usize) -> Self {
        Self {
            h,
            steps: vec![0.0; Self::WIDTH * h * len],
        }
    }

    fn step(&self, t: usize) -> &[f64] {
        let w = Self::WIDTH * self.h;
        &self.steps[t * w..(t + 1) * w]
    }

    fn step_mut(&mut self, t: usize) -> &mut [f64] {
        let w = Self::WIDTH * self.h;
        &mut self.steps[t * w..(t + 1) * w]
    }
}

impl<'a> Lstm<'a> {
    pub fn new(h: usize, params: &'a ParamVector) -> Self {
        let layout = Layout::new(h);
        let p = params.as_slice();
        Self {
            h,
            w: &p[layout.weights()],
            b: &p[layout.bias()],
            head_w: &p[layout.head_weights()],
            head_b: p[layout.head_bias()],
            layout,
        }
    }

    /// Runs the recurrence, filling `tape` when given. Returns the prediction.
    fn run(&self, input: &[f64], mut tape: Option<&mut Tape>) -> f64 {
        let h = self.h;
        let cols = self.layout.cols();
        let mut hidden = vec![0.0; h];
        let mut cell = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for (t, &x) in input.iter().enumerate() {
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &self.w[r * cols..(r + 1) * cols];
                let mut acc = self.b[r] + row[0] * x;
                for (wj, hj) in row[1..].iter().zip(&hidden) {
                    acc += wj * hj;
                }
                *zr = acc;
            }
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                cell[j] = f * cell[j] + i * g;
                let tc = cell[j].tanh();
                hidden[j] = o * tc;
                if let Some(tape) = tape.as_deref_mut() {
                    let s = tape.step_mut(t);
                    s[j] = i;
                    s[h + j] = f;
                    s[2 * h + j] = g;
                    s[3 * h + j] = o;
                    s[4 * h + j] = cell[j];
                    s[5 * h + j] = tc;
                    s[6 * h + j] = hidden[j];
                }
            }
        }
        self.head_b + self.head_w.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
    }

    pub fn predict(&self, input: &[f64]) -> f64 {
        self.run(input, None)
    }

    pub fn loss_and_grad<S: Borrow<Sample>>(&self, batch: &[S]) -> (f64, Vec<f64>) {
        let h = self.h;
        let cols = self.layout.cols();
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.layout.len()];
        let (gw, rest) = grad.split_at_mut(self.layout.bias().start);
        let (gb, rest) = rest.split_at_mut(4 * h);
        let (ghead_w, ghead_b) = rest.split_at_mut(h);

        let len = batch.first().map_or(0, |s| s.borrow().input.len());
        let mut tape = Tape::new(h, len);
        let mut dh = vec![0.0; h];
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut loss = 0.0;

        for s in batch {
            let s = s.borrow();
            let y = self.run(&s.input, Some(&mut tape));
            let err = y - s.target;
            loss += err * err;
            let dy = 2.0 * err / n;

            let last = tape.step(len - 1);
            for j in 0..h {
                ghead_w[j] += dy * last[6 * h + j];
                dh[j] = dy * self.head_w[j];
                dc[j] = 0.0;
            }
            ghead_b[0] += dy;

            for t in (0..len).rev() {
                let cur = tape.step(t);
                for j in 0..h {
                    let (i, f, g, o) = (cur[j], cur[h + j], cur[2 * h + j], cur[3 * h + j]);
                    let tc = cur[5 * h + j];
                    let c_prev = if t > 0 { tape.step(t - 1)[4 * h + j] } else { 0.0 };
                    let d_o = dh[j] * tc;
                    dc[j] += dh[j] * o * (1.0 - tc * tc);
                    dz[j] = dc[j] * g * i * (1.0 - i);
                    dz[h + j] = dc[j] * c_prev * f * (1.0 - f);
                    dz[2 * h + j] = dc[j] * i * (1.0 - g * g);
                    dz[3 * h + j] = d_o * o * (1.0 - o);
                    dc[j] *= f;
                }
                let x = s.input[t];
                dh.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..4 * h {
                    let d = dz[r];
                    gb[r] += d;
                    let grow = &mut gw[r * cols..(r + 1) * cols];
                    grow[0] += d * x;
                    let row = &self.w[r * cols + 1..(r + 1) * cols];
                    if t > 0 {
                        let h_prev = &tape.step(t - 1)[6 * h..7 * h];
                        for ((gwj, hj), (wj, dhj)) in
                            grow[1..].iter_mut().zip(h_prev).zip(row.iter().zip(dh.iter_mut()))
                        {
                            *gwj += d * hj;
                            *dhj += wj * d;
                        }
                    }
                }
            }
        }
        (loss / n, grad)
    }
}
