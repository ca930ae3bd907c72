use ndarray::{Array1, ArrayView2, ArrayViewMut2};

/// Column-wise max over rows, with the winning row of each column. Rows whose
/// `valid` flag is false are treated as `-inf`. At least one row must be valid.
pub fn max_pool_masked(h: ArrayView2<f64>, valid: Option<&[bool]>) -> (Array1<f64>, Vec<usize>) {
    let (rows, cols) = h.dim();
    let mut out = Array1::from_elem(cols, f64::NEG_INFINITY);
    let mut arg = vec![usize::MAX; cols];
    for t in 0..rows {
        if valid.is_some_and(|v| !v[t]) {
            continue;
        }
        let row = h.row(t);
        for c in 0..cols {
            if row[c] > out[c] || arg[c] == usize::MAX {
                out[c] = row[c];
                arg[c] = t;
            }
        }
    }
    assert!(arg.iter().all(|&a| a != usize::MAX), "max pool over zero valid rows");
    (out, arg)
}

pub fn max_pool(h: ArrayView2<f64>) -> (Array1<f64>, Vec<usize>) {
    max_pool_masked(h, None)
}

/// Scatter the pooled gradient back to the winning rows.
pub fn max_pool_backward(arg: &[usize], d_out: &[f64], mut d_h: ArrayViewMut2<f64>) {
    for (c, (&t, &g)) in arg.iter().zip(d_out).enumerate() {
        d_h[[t, c]] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pools_columnwise() {
        let h = array![[1.0, 5.0], [3.0, 2.0]];
        let (v, arg) = max_pool(h.view());
        assert_eq!(v.to_vec(), vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }

    #[test]
    fn masked_rows_never_win() {
        let h = array![[1.0, 5.0], [3.0, 2.0], [99.0, 99.0]];
        let (v, _) = max_pool_masked(h.view(), Some(&[true, true, false]));
        assert_eq!(v.to_vec(), vec![3.0, 5.0]);
    }
}
