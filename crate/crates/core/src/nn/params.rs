use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

/// A `rows x cols` row-major block inside a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()]).expect("slot shape")
    }

    pub fn vec<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }

    pub fn vec_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut buf[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Each consecutive `cols x cols` row block is an orthogonal matrix.
    OrthogonalBlocks,
    /// LSTM gate bias of hidden width `H`: zero except the forget block
    /// (`H..2H`), which is 1.
    ForgetBias(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub slot: Slot,
    pub init: Init,
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    entries: Vec<Entry>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += slot.len();
        self.entries.push(Entry {
            name: name.into(),
            slot,
            init,
        });
        slot
    }

    pub fn finish(self) -> Layout {
        Layout {
            entries: self.entries,
            len: self.len,
        }
    }
}

/// Names, shapes and initializers of every parameter tensor of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<Entry>,
    pub len: usize,
}

impl Layout {
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut buf = vec![0.0; self.len];
        for e in &self.entries {
            let dst = &mut buf[e.slot.range()];
            match e.init {
                Init::Zero => {}
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    dst.iter_mut().for_each(|x| *x = dist.sample(rng));
                }
                Init::ForgetBias(h) => dst[h..2 * h].fill(1.0),
                Init::OrthogonalBlocks => {
                    let n = e.slot.cols;
                    for block in dst.chunks_mut(n * n) {
                        let q = random_orthogonal(n, rng);
                        block.copy_from_slice(&q[..block.len()]);
                    }
                }
            }
        }
        buf
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Row-major `n x n` orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    let mut i = 0;
    while i < n {
        let mut row: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for j in 0..i {
                let prev = &q[j * n..(j + 1) * n];
                let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        q[i * n..(i + 1) * n]
            .iter_mut()
            .zip(&row)
            .for_each(|(d, r)| *d = r / norm);
        i += 1;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let mut b = LayoutBuilder::new();
        let s = b.add("w", 8, 4, Init::OrthogonalBlocks);
        let layout = b.finish();
        let buf = layout.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        let m = s.mat(&buf);
        for blk in 0..2 {
            let q = m.slice(ndarray::s![blk * 4..(blk + 1) * 4, ..]);
            let prod = q.dot(&q.t());
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[[i, j]] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fan_in_bounds_and_zero_bias() {
        let mut b = LayoutBuilder::new();
        let w = b.add("w", 10, 16, Init::FanIn(16));
        let bias = b.add("b", 10, 1, Init::Zero);
        let layout = b.finish();
        let buf = layout.initialize(&mut ChaCha8Rng::seed_from_u64(2));
        assert!(w.vec(&buf).iter().all(|x| x.abs() <= 0.25));
        assert!(bias.vec(&buf).iter().all(|&x| x == 0.0));
        assert_eq!(layout.len, 170);
    }
}
