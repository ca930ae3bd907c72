use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Init, LayoutBuilder, Slot};

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut LayoutBuilder, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), output, input, Init::FanIn(input)),
            bias: layout.add(format!("{name}.bias"), output, 1, Init::Zero),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, params: &[f64], x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.mat(params).dot(&x) + &self.bias.vec(params)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        {
            let mut gw = self.weight.mat_mut(grads);
            for (i, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    gw.row_mut(i).scaled_add(d, &x);
                }
            }
        }
        self.bias.vec_mut(grads).scaled_add(1.0, &dy);
        self.weight.mat(params).t().dot(&dy)
    }

    /// Row-wise forward over a `T x input` matrix.
    pub fn forward_rows(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.mat(params).t()) + &self.bias.vec(params)
    }

    pub fn backward_rows(&self, params: &[f64], grads: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        {
            let mut gw = self.weight.mat_mut(grads);
            gw += &dy.t().dot(&x);
        }
        self.bias.vec_mut(grads).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.weight.mat(params))
    }
}
