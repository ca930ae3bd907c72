//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Parameters of a whole model live in one flat `Vec<f64>`; layers hold
//! [`Slot`]s into it. A gradient buffer has the same layout, which makes the
//! optimizer, serialization and finite-difference checks layout-agnostic.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod lstm;
pub mod params;
pub mod pool;

pub use adam::Adam;
pub use params::{Init, Layout, LayoutBuilder, Slot};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against class `target`, and its gradient with
/// respect to the logits (`softmax - onehot`).
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let (l4, g) = cross_entropy(&[0.0; 4], 2);
        assert!((l4 - 4f64.ln()).abs() < 1e-15);
        assert!((g[2] + 0.75).abs() < 1e-15);
        let (l3, _) = cross_entropy(&[0.0; 3], 0);
        assert!((l3 - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && p[2] == 0.0);
    }
}
