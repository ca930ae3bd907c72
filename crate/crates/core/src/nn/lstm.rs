//! Single-direction and bidirectional LSTM layers.
//!
//! Gate order inside the stacked `4H` dimension is input, forget, cell,
//! output. Outputs are always indexed in original time order; a reversed
//! direction reads `x[T-1]` first and its `h[t]` summarizes `x[t..]`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{Init, LayoutBuilder, Slot};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub input_weight: Slot,
    pub hidden_weight: Slot,
    pub bias: Slot,
    pub hidden: usize,
    pub reverse: bool,
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Post-activation gates, `T x 4H`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl Lstm {
    pub fn new(layout: &mut LayoutBuilder, name: &str, input: usize, hidden: usize, reverse: bool) -> Self {
        Self {
            input_weight: layout.add(format!("{name}.w_ih"), 4 * hidden, input, Init::FanIn(input)),
            hidden_weight: layout.add(format!("{name}.w_hh"), 4 * hidden, hidden, Init::OrthogonalBlocks),
            bias: layout.add(format!("{name}.bias"), 4 * hidden, 1, Init::ForgetBias(hidden)),
            hidden,
            reverse,
        }
    }

    fn order(&self, len: usize) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        }
    }

    /// Index of the step processed before `t`, if any.
    fn prev(&self, t: usize, len: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> LstmTrace {
        let len = x.nrows();
        let h = self.hidden;
        let w_hh = self.hidden_weight.mat(params);
        let mut pre = x.dot(&self.input_weight.mat(params).t()) + &self.bias.vec(params);
        let mut cells = Array2::zeros((len, h));
        let mut hidden = Array2::zeros((len, h));
        for t in self.order(len) {
            let mut a = pre.row_mut(t);
            let c_prev = match self.prev(t, len) {
                Some(p) => {
                    a += &w_hh.dot(&hidden.row(p));
                    cells.row(p).to_owned()
                }
                None => Array1::<f64>::zeros(h),
            };
            for k in 0..h {
                a[k] = sigmoid(a[k]);
                a[h + k] = sigmoid(a[h + k]);
                a[2 * h + k] = a[2 * h + k].tanh();
                a[3 * h + k] = sigmoid(a[3 * h + k]);
                let c: f64 = a[h + k] * c_prev[k] + a[k] * a[2 * h + k];
                cells[[t, k]] = c;
                hidden[[t, k]] = a[3 * h + k] * c.tanh();
            }
        }
        LstmTrace {
            gates: pre,
            cells,
            hidden,
        }
    }

    /// Backpropagate `d_hidden` (`T x H`, gradient of the loss w.r.t. every
    /// output state). Accumulates into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        x: ArrayView2<f64>,
        trace: &LstmTrace,
        d_hidden: ArrayView2<f64>,
    ) -> Array2<f64> {
        let len = x.nrows();
        let h = self.hidden;
        let w_hh = self.hidden_weight.mat(params);
        let mut d_pre = Array2::<f64>::zeros((len, 4 * h));
        let mut h_prev = Array2::<f64>::zeros((len, h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        let order: Vec<usize> = self.order(len).collect();
        for &t in order.iter().rev() {
            let g = trace.gates.row(t);
            let prev = self.prev(t, len);
            if let Some(p) = prev {
                h_prev.row_mut(t).assign(&trace.hidden.row(p));
            }
            let mut da = d_pre.row_mut(t);
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let c = trace.cells[[t, k]];
                let c_prev = prev.map_or(0.0, |p| trace.cells[[p, k]]);
                let tc = c.tanh();
                let dh = d_hidden[[t, k]] + dh_next[k];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                da[k] = dc * gg * i * (1.0 - i);
                da[h + k] = dc * c_prev * f * (1.0 - f);
                da[2 * h + k] = dc * i * (1.0 - gg * gg);
                da[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next = w_hh.t().dot(&da);
        }
        {
            let mut gw = self.input_weight.mat_mut(grads);
            gw += &d_pre.t().dot(&x);
        }
        {
            let mut gh = self.hidden_weight.mat_mut(grads);
            gh += &d_pre.t().dot(&h_prev);
        }
        self.bias.vec_mut(grads).scaled_add(1.0, &d_pre.sum_axis(Axis(0)));
        d_pre.dot(&self.input_weight.mat(params))
    }
}

/// Forward and backward LSTMs whose outputs are concatenated per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    fwd: LstmTrace,
    bwd: LstmTrace,
}

impl BiLstmTrace {
    /// `T x 2H` concatenated states.
    pub fn output(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.fwd.hidden.view(), self.bwd.hidden.view()]).expect("same rows")
    }

    pub fn forward_states(&self) -> ArrayView2<'_, f64> {
        self.fwd.hidden.view()
    }

    pub fn backward_states(&self) -> ArrayView2<'_, f64> {
        self.bwd.hidden.view()
    }
}

impl BiLstm {
    pub fn new(layout: &mut LayoutBuilder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            forward: Lstm::new(layout, &format!("{name}.fwd"), input, hidden, false),
            backward: Lstm::new(layout, &format!("{name}.bwd"), input, hidden, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn run(&self, params: &[f64], x: ArrayView2<f64>) -> BiLstmTrace {
        BiLstmTrace {
            fwd: self.forward.forward(params, x),
            bwd: self.backward.forward(params, x),
        }
    }

    /// `d_out` is `T x 2H`, split between the two directions.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        x: ArrayView2<f64>,
        trace: &BiLstmTrace,
        d_out: ArrayView2<f64>,
    ) -> Array2<f64> {
        let h = self.hidden();
        let dx_f = self
            .forward
            .backward(params, grads, x, &trace.fwd, d_out.slice(s![.., ..h]));
        let dx_b = self
            .backward
            .backward(params, grads, x, &trace.bwd, d_out.slice(s![.., h..]));
        dx_f + dx_b
    }
}
