use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Low-rank residual on a frozen `[rows, cols]` matrix:
/// `W_eff = W + (scale / rank) * B A` with `B: [rows, rank]`, `A: [rank, cols]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub(crate) target: String,
    pub(crate) rank: usize,
    pub(crate) scale: f32,
    pub(crate) a: DenseArray,
    pub(crate) b: DenseArray,
    pub(crate) frozen: bool,
}

impl LoraAdapter {
    /// `B` starts at zero so the adapted matrix initially equals `W` exactly.
    pub fn new(target: &str, rows: usize, cols: usize, rank: usize, scale: f32, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= rows.min(cols) {
            return Err(Error::Lora(format!(
                "rank {rank} must lie in 1..{} for a {rows}x{cols} matrix",
                rows.min(cols)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (rank as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let a_vals = (0..rank * cols).map(|_| dist.sample(&mut rng) as f32).collect();
        Ok(Self {
            target: target.to_owned(),
            rank,
            scale,
            a: DenseArray::new(vec![rank, cols], a_vals)?.with_requires_grad(true),
            b: DenseArray::zeros(&[rows, rank]).with_requires_grad(true),
            frozen: false,
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn a(&self) -> &DenseArray {
        &self.a
    }

    pub fn b(&self) -> &DenseArray {
        &self.b
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn freeze(&mut self) {
        self.frozen = true;
        for p in [&mut self.a, &mut self.b] {
            p.set_requires_grad(false);
            p.clear_grad();
        }
    }

    pub fn a_name(&self) -> String {
        format!("lora/{}/a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora/{}/b", self.target)
    }

    /// `scale / rank`.
    pub fn factor(&self) -> f64 {
        f64::from(self.scale) / self.rank as f64
    }

    pub fn rows(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Trainable adapter entries relative to the adapted matrix.
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable_count() as f64 / (self.rows() * self.cols()) as f64
    }

    /// `(scale / rank) * B A`, accumulated in 64-bit.
    pub fn delta(&self) -> DenseArray {
        let (rows, cols, r) = (self.rows(), self.cols(), self.rank);
        let (a, b) = (self.a.values(), self.b.values());
        let f = self.factor();
        let mut out = vec![0.0f32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let s: f64 = (0..r).map(|k| f64::from(b[i * r + k]) * f64::from(a[k * cols + j])).sum();
                out[i * cols + j] = (f * s) as f32;
            }
        }
        DenseArray::new(vec![rows, cols], out).expect("consistent shape")
    }

    /// `W + delta`.
    pub fn effective(&self, w: &DenseArray) -> Result<DenseArray> {
        if w.shape() != [self.rows(), self.cols()] {
            return Err(Error::ShapeMismatch {
                op: "lora effective weight",
                lhs: w.shape().to_vec(),
                rhs: vec![self.rows(), self.cols()],
            });
        }
        let d = self.delta();
        let values = w.values().iter().zip(d.values()).map(|(x, y)| x + y).collect();
        DenseArray::new(w.shape().to_vec(), values)
    }

    pub(crate) fn params_mut(&mut self) -> [(String, &mut DenseArray); 2] {
        let (an, bn) = (self.a_name(), self.b_name());
        [(an, &mut self.a), (bn, &mut self.b)]
    }
}
