use ndarray::{Array1, ArrayView1, ArrayView2};

use super::params::{Init, LayoutBuilder, Slot};

/// Temporal convolution of width `width` over a `T x D` matrix, one input
/// channel, `channels` filters, ReLU, then max over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBank {
    pub weight: Slot,
    pub bias: Slot,
    pub width: usize,
    pub input: usize,
}

/// Pooled outputs and the winning window start per channel.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    pub pooled: Array1<f64>,
    argmax: Vec<usize>,
}

impl ConvBank {
    pub fn new(layout: &mut LayoutBuilder, name: &str, width: usize, input: usize, channels: usize) -> Self {
        let fan_in = width * input;
        Self {
            weight: layout.add(format!("{name}.weight"), channels, fan_in, Init::FanIn(fan_in)),
            bias: layout.add(format!("{name}.bias"), channels, 1, Init::Zero),
            width,
            input,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.rows
    }

    fn window<'a>(&self, x: &'a [f64], start: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&x[start * self.input..(start + self.width) * self.input])
    }

    /// `x` must have at least `width` rows and be in standard layout.
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> ConvTrace {
        let flat = x.as_slice().expect("contiguous input");
        let positions = x.nrows() + 1 - self.width;
        let w = self.weight.mat(params);
        let b = self.bias.vec(params);
        let mut pooled = Array1::from_elem(self.channels(), f64::NEG_INFINITY);
        let mut argmax = vec![0; self.channels()];
        for t in 0..positions {
            let resp = w.dot(&self.window(flat, t));
            for c in 0..self.channels() {
                let v = (resp[c] + b[c]).max(0.0);
                if v > pooled[c] || t == 0 {
                    pooled[c] = v;
                    argmax[c] = t;
                }
            }
        }
        ConvTrace { pooled, argmax }
    }

    /// Accumulates parameter gradients. Inputs are frozen embeddings, so no
    /// input gradient is produced.
    pub fn backward(&self, grads: &mut [f64], x: ArrayView2<f64>, trace: &ConvTrace, d_pooled: ArrayView1<f64>) {
        let flat = x.as_slice().expect("contiguous input");
        for c in 0..self.channels() {
            if trace.pooled[c] <= 0.0 {
                continue;
            }
            let d = d_pooled[c];
            let win = self.window(flat, trace.argmax[c]);
            self.weight.mat_mut(grads).row_mut(c).scaled_add(d, &win);
            grads[self.bias.offset + c] += d;
        }
    }
}
