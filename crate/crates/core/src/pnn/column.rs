use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Tape, Var};

/// One task column: `h = relu(x W1 + b1)`, `logits = h W2 + b2`.
///
/// Weights are stored input-major (`W1` is `[d_model, d_col]`) so a batch of
/// position vectors multiplies on the left.
#[derive(Clone, Debug)]
pub struct Column {
    pub(crate) task_id: u32,
    pub(crate) w1: DenseArray,
    pub(crate) b1: DenseArray,
    pub(crate) w2: DenseArray,
    pub(crate) b2: DenseArray,
    pub(crate) frozen: bool,
}

pub(crate) const COLUMN_FIELDS: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng) as f32).collect();
    DenseArray::new(shape.to_vec(), values).expect("consistent shape")
}

impl Column {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, trainable.
    pub fn new(task_id: u32, d_model: usize, d_col: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut col = Self {
            task_id,
            w1: uniform(&[d_model, d_col], d_model, &mut rng),
            b1: DenseArray::zeros(&[d_col]),
            w2: uniform(&[d_col, vocab], d_col, &mut rng),
            b2: DenseArray::zeros(&[vocab]),
            frozen: false,
        };
        col.set_trainable(true);
        col
    }

    /// Builds a column from explicit weights; shapes must agree.
    pub fn from_weights(task_id: u32, w1: DenseArray, b1: DenseArray, w2: DenseArray, b2: DenseArray) -> Result<Self> {
        let err = || Error::ShapeMismatch {
            op: "column weights",
            lhs: w1.shape().to_vec(),
            rhs: w2.shape().to_vec(),
        };
        let (_, d_col) = w1.dims2().ok_or_else(err)?;
        let (d_col2, vocab) = w2.dims2().ok_or_else(err)?;
        if d_col != d_col2 || b1.shape() != [d_col] || b2.shape() != [vocab] {
            return Err(err());
        }
        let mut col = Self {
            task_id,
            w1,
            b1,
            w2,
            b2,
            frozen: false,
        };
        col.set_trainable(true);
        Ok(col)
    }

    pub fn task_id(&self) -> u32 {
        self.task_id
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_col(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn w1(&self) -> &DenseArray {
        &self.w1
    }

    pub fn b1(&self) -> &DenseArray {
        &self.b1
    }

    pub fn w2(&self) -> &DenseArray {
        &self.w2
    }

    pub fn b2(&self) -> &DenseArray {
        &self.b2
    }

    pub(crate) fn fields(&self) -> [&DenseArray; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn fields_mut(&mut self) -> [&mut DenseArray; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub(crate) fn set_trainable(&mut self, on: bool) {
        for p in self.fields_mut() {
            p.set_requires_grad(on);
            p.clear_grad();
        }
    }

    pub(crate) fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    /// `relu(x W1 + b1)` for `x` of shape `[n, d_model]`.
    pub fn hidden(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let w = tape.constant(&self.w1);
        let b = tape.constant(&self.b1);
        let h = column_hidden_on_tape(&mut tape, x, w, b)?;
        Ok(tape.array(h))
    }

    /// `h W2 + b2` for `h` of shape `[n, d_col]`.
    pub fn logits(&self, h: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let h = tape.constant(h);
        let w = tape.constant(&self.w2);
        let b = tape.constant(&self.b2);
        let l = column_logits_on_tape(&mut tape, h, w, b)?;
        Ok(tape.array(l))
    }
}

/// Maps a prior column's hidden activations into a later column.
#[derive(Clone, Debug)]
pub struct LateralAdapter {
    pub(crate) source: usize,
    pub(crate) dest: usize,
    pub(crate) u: DenseArray,
}

impl LateralAdapter {
    /// Identity-initialized and trainable.
    pub fn identity(source: usize, dest: usize, d_col: usize) -> Self {
        Self {
            source,
            dest,
            u: DenseArray::identity(d_col).with_requires_grad(true),
        }
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn dest(&self) -> usize {
        self.dest
    }

    pub fn matrix(&self) -> &DenseArray {
        &self.u
    }

    pub fn name(&self) -> String {
        adapter_name(self.source, self.dest)
    }
}

pub fn column_param_name(column: usize, field: &str) -> String {
    format!("col{column}/{field}")
}

pub fn adapter_name(source: usize, dest: usize) -> String {
    format!("adapter/{source}->{dest}")
}

pub(crate) fn column_hidden_on_tape(tape: &mut Tape, x: Var, w1: Var, b1: Var) -> Result<Var> {
    let z = tape.matmul(x, w1)?;
    let z = tape.add_row(z, b1)?;
    Ok(tape.relu(z))
}

pub(crate) fn column_logits_on_tape(tape: &mut Tape, h: Var, w2: Var, b2: Var) -> Result<Var> {
    let z = tape.matmul(h, w2)?;
    tape.add_row(z, b2)
}

/// `sum_i h_i U_i`; `None` for the empty sum.
pub(crate) fn lateral_on_tape(tape: &mut Tape, terms: &[(Var, Var)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(h, u) in terms {
        let t = tape.matmul(h, u)?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc)
}

/// `alpha * base + (1 - alpha) * pnn`.
pub(crate) fn fuse_on_tape(tape: &mut Tape, base: Var, pnn: Var, alpha: f32) -> Result<Var> {
    let a = f64::from(alpha);
    let b = tape.scale(base, a);
    let p = tape.scale(pnn, 1.0 - a);
    tape.add(b, p)
}

/// `H_base + H_lateral`.
pub fn combined_hidden(h_base: &DenseArray, h_lateral: &DenseArray) -> Result<DenseArray> {
    let mut tape = Tape::new();
    let a = tape.constant(h_base);
    let b = tape.constant(h_lateral);
    let c = tape.add(a, b)?;
    Ok(tape.array(c))
}

/// `alpha * logits_base + (1 - alpha) * logits_pnn`.
pub fn fuse_logits(logits_base: &DenseArray, logits_pnn: &DenseArray, alpha: f32) -> Result<DenseArray> {
    check_alpha(alpha)?;
    let mut tape = Tape::new();
    let a = tape.constant(logits_base);
    let b = tape.constant(logits_pnn);
    let f = fuse_on_tape(&mut tape, a, b, alpha)?;
    Ok(tape.array(f))
}

pub(crate) fn check_alpha(alpha: f32) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}
