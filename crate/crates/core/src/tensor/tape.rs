//! Reverse-mode differentiation over [`DenseArray`] values.
//!
//! Operations append nodes to a [`Tape`]; node indices are a topological
//! order, so [`Tape::backward`] walks them in reverse. Leaf gradients persist
//! across `backward` calls and accumulate, intermediate gradients are reset
//! at the start of every call.

use super::array::{DenseArray, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// How [`Tape::cross_entropy`] reduces per-position losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Log(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        scale: f64,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
    },
}

#[derive(Debug)]
struct Meta {
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    meta: Vec<Meta>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    // Op-specific buffers kept for the backward pass (softmax probabilities,
    // normalized activations, ...).
    saved: Vec<Vec<T>>,
}

/// Numerically stable `-ln softmax(row)[target]`, evaluated in 64-bit.
pub fn row_nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + sum.ln() - row[target].to_f64()
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut exps = Vec::with_capacity(row.len());
    for v in row {
        let e = (v.to_f64() - max).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64(e / sum);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            saved: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.meta.push(Meta {
            shape,
            op,
            needs_grad,
            param: None,
        });
        self.values.push(value);
        self.grads.push(None);
        self.saved.push(Vec::new());
        Var(self.meta.len() - 1)
    }

    /// Records an input array; it participates in differentiation when the
    /// array's `requires_grad` flag is set.
    pub fn leaf(&mut self, array: &DenseArray<T>) -> Var {
        self.push(
            array.shape().to_vec(),
            array.values().to_vec(),
            Op::Leaf,
            array.requires_grad(),
        )
    }

    /// Records an input that is never differentiated.
    pub fn constant(&mut self, array: &DenseArray<T>) -> Var {
        self.push(array.shape().to_vec(), array.values().to_vec(), Op::Leaf, false)
    }

    /// Records a named parameter. Named leaves are reported by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, array: &DenseArray<T>, requires_grad: bool) -> Var {
        let var = self.push(
            array.shape().to_vec(),
            array.values().to_vec(),
            Op::Leaf,
            requires_grad,
        );
        self.meta[var.0].param = Some(name.to_owned());
        var
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.meta[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.meta[v.0].needs_grad
    }

    /// Copy of a node's value as a standalone array.
    pub fn array(&self, v: Var) -> DenseArray<T> {
        DenseArray::new(self.meta[v.0].shape.clone(), self.values[v.0].clone())
            .expect("tape nodes hold consistent shapes")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every named parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.meta.iter().enumerate().filter_map(|(i, m)| {
            let name = m.param.as_deref()?;
            Some((name, self.grads[i].as_deref()?))
        })
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.meta[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.meta[a.0].shape, &self.meta[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.meta[v.0].needs_grad)
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.meta[a.0].shape.clone();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds the vector `bias` to every row of the matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_row")?;
        if self.values[bias.0].len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.meta[x.0].shape.clone(),
                rhs: self.meta[bias.0].shape.clone(),
            });
        }
        let b = &self.values[bias.0];
        let mut value = self.values[x.0].clone();
        for r in 0..rows {
            add_into(&mut value[r * cols..(r + 1) * cols], b);
        }
        let needs = self.any_grad(&[x, bias]);
        Ok(self.push(vec![rows, cols], value, Op::AddRow(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        let value = self.values[x.0].iter().map(|v| *v * c).collect();
        let shape = self.meta[x.0].shape.clone();
        let needs = self.any_grad(&[x]);
        self.push(shape, value, Op::Scale(x, factor), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut value = vec![T::ZERO; m * n];
        T::gemm(m, k, n, &self.values[a.0], false, &self.values[b.0], false, T::ZERO, &mut value);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.values[x.0]
            .iter()
            .map(|v| if *v > T::ZERO { *v } else { T::ZERO })
            .collect();
        let shape = self.meta[x.0].shape.clone();
        let needs = self.any_grad(&[x]);
        self.push(shape, value, Op::Relu(x), needs)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.values[x.0]
            .iter()
            .map(|v| T::from_f64(v.to_f64().ln()))
            .collect();
        let shape = self.meta[x.0].shape.clone();
        let needs = self.any_grad(&[x]);
        self.push(shape, value, Op::Log(x), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let mut value = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            softmax_into(&self.values[x.0][span.clone()], &mut value[span]);
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(vec![rows, cols], value, Op::SoftmaxRows(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.values[x.0].iter().map(|v| v.to_f64()).sum();
        let needs = self.any_grad(&[x]);
        self.push(vec![1], vec![T::from_f64(total)], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len() as f64;
        let total: f64 = self.values[x.0].iter().map(|v| v.to_f64()).sum();
        let needs = self.any_grad(&[x]);
        self.push(vec![1], vec![T::from_f64(total / n)], Op::Mean(x), needs)
    }

    /// Softmax cross-entropy of each logits row against its target.
    /// Rows whose target is `None` do not contribute.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<u32>],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::CountMismatch {
                what: "targets",
                expected: rows,
                got: targets.len(),
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("target set"));
        }
        let mut probs = vec![T::ZERO; rows * cols];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let t = t as usize;
            if t >= cols {
                return Err(Error::TokenOutOfRange {
                    token: t as u32,
                    vocab: cols,
                });
            }
            let span = r * cols..(r + 1) * cols;
            let row = &self.values[logits.0][span.clone()];
            total += row_nll(row, t);
            softmax_into(row, &mut probs[span]);
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let needs = self.any_grad(&[logits]);
        let var = self.push(
            vec![1],
            vec![T::from_f64(total * scale)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
            },
            needs,
        );
        self.saved[var.0] = probs;
        Ok(var)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    token: id as u32,
                    vocab: rows,
                });
            }
            value.extend_from_slice(&self.values[table.0][id * cols..(id + 1) * cols]);
        }
        if ids.is_empty() {
            return Err(Error::Empty("index list"));
        }
        let needs = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Row-wise layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.values[p.0].len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.meta[x.0].shape.clone(),
                    rhs: self.meta[p.0].shape.clone(),
                });
            }
        }
        let (g, b) = (&self.values[gain.0], &self.values[bias.0]);
        let mut value = vec![T::ZERO; rows * cols];
        // saved layout: rows*cols normalized activations, then rows rstd values
        let mut saved = vec![T::ZERO; rows * cols + rows];
        for r in 0..rows {
            let row = &self.values[x.0][r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| (v.to_f64() - mean).powi(2))
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xhat = (row[c].to_f64() - mean) * rstd;
                saved[r * cols + c] = T::from_f64(xhat);
                value[r * cols + c] = T::from_f64(xhat * g[c].to_f64() + b[c].to_f64());
            }
            saved[rows * cols + r] = T::from_f64(rstd);
        }
        let needs = self.any_grad(&[x, gain, bias]);
        let var = self.push(vec![rows, cols], value, Op::LayerNorm { x, gain, bias }, needs);
        self.saved[var.0] = saved;
        Ok(var)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with `N = segments.iter().sum()`; each
    /// segment is an independent sequence, and position `i` of a segment
    /// attends to positions `0..=i` of the same segment only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (n, d) = self.dims2(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let total: usize = segments.iter().sum();
        if total != n || segments.contains(&0) {
            return Err(Error::CountMismatch {
                what: "packed positions",
                expected: n,
                got: total,
            });
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let mut out = vec![T::ZERO; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| l * l).sum::<usize>() * heads);
        let mut offset = 0;
        for &len in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qv[(offset + i) * d..][cols.clone()];
                    let mut scores = vec![0.0f64; len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv[(offset + j) * d..][cols.clone()];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        *s = dot * inv_sqrt;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let mut acc = vec![0.0f64; dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = if j <= i { s / sum } else { 0.0 };
                        probs.push(T::from_f64(p));
                        if j <= i {
                            let vj = &vv[(offset + j) * d..][cols.clone()];
                            for (a, x) in acc.iter_mut().zip(vj) {
                                *a += p * x.to_f64();
                            }
                        }
                    }
                    for (o, a) in out[(offset + i) * d..][cols.clone()].iter_mut().zip(acc) {
                        *o = T::from_f64(a);
                    }
                }
            }
            offset += len;
        }
        let needs = self.any_grad(&[q, k, v]);
        let var = self.push(
            vec![n, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
            },
            needs,
        );
        self.saved[var.0] = probs;
        Ok(var)
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
    }

    /// Accumulates `d loss / d x` into every leaf that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.meta[loss.0].shape.clone()));
        }
        for (m, g) in self.meta.iter().zip(self.grads.iter_mut()) {
            if !matches!(m.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.meta[loss.0].needs_grad {
            return Ok(());
        }
        self.grad_buf(loss)[0] += T::ONE;

        for i in (0..=loss.0).rev() {
            if !self.meta[i].needs_grad || matches!(self.meta[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so input grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.meta[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.needs_grad(x) {
                        add_into(self.grad_buf(x), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    add_into(self.grad_buf(*a), g);
                }
                if self.needs_grad(*b) {
                    for (d, s) in self.grad_buf(*b).iter_mut().zip(g) {
                        *d += -*s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs_grad(a) {
                    let delta: Vec<T> = g.iter().zip(&self.values[b.0]).map(|(g, y)| *g * *y).collect();
                    add_into(self.grad_buf(a), &delta);
                }
                if self.needs_grad(b) {
                    let delta: Vec<T> = g.iter().zip(&self.values[a.0]).map(|(g, x)| *g * *x).collect();
                    add_into(self.grad_buf(b), &delta);
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs_grad(*x) {
                    add_into(self.grad_buf(*x), g);
                }
                if self.needs_grad(*bias) {
                    let cols = self.values[bias.0].len();
                    let mut acc = vec![0.0f64; cols];
                    for row in g.chunks(cols) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    for (d, a) in self.grad_buf(*bias).iter_mut().zip(acc) {
                        *d += T::from_f64(a);
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = T::from_f64(*c);
                for (d, s) in self.grad_buf(*x).iter_mut().zip(g) {
                    *d += *s * c;
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.meta[a.0].shape[0], self.meta[a.0].shape[1]);
                let n = self.meta[b.0].shape[1];
                if self.needs_grad(a) {
                    let mut ga = self.grads[a.0].take().unwrap_or_else(|| vec![T::ZERO; m * k]);
                    T::gemm(m, n, k, g, false, &self.values[b.0], true, T::ONE, &mut ga);
                    self.grads[a.0] = Some(ga);
                }
                if self.needs_grad(b) {
                    let mut gb = self.grads[b.0].take().unwrap_or_else(|| vec![T::ZERO; k * n]);
                    T::gemm(k, m, n, &self.values[a.0], true, g, false, T::ONE, &mut gb);
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::Relu(x) => {
                let delta: Vec<T> = g
                    .iter()
                    .zip(&self.values[x.0])
                    .map(|(g, v)| if *v > T::ZERO { *g } else { T::ZERO })
                    .collect();
                add_into(self.grad_buf(*x), &delta);
            }
            Op::Log(x) => {
                let delta: Vec<T> = g.iter().zip(&self.values[x.0]).map(|(g, v)| *g / *v).collect();
                add_into(self.grad_buf(*x), &delta);
            }
            Op::SoftmaxRows(x) => {
                let cols = self.meta[x.0].shape[1];
                let p = &self.values[i];
                let mut delta = vec![T::ZERO; p.len()];
                for ((dr, pr), gr) in delta.chunks_mut(cols).zip(p.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p.to_f64() * g.to_f64()).sum();
                    for ((d, p), g) in dr.iter_mut().zip(pr).zip(gr) {
                        *d = T::from_f64(p.to_f64() * (g.to_f64() - dot));
                    }
                }
                add_into(self.grad_buf(*x), &delta);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                for d in self.grad_buf(*x).iter_mut() {
                    *d += g0;
                }
            }
            Op::Mean(x) => {
                let g0 = T::from_f64(g[0].to_f64() / self.values[x.0].len() as f64);
                for d in self.grad_buf(*x).iter_mut() {
                    *d += g0;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
            } => {
                let cols = self.meta[logits.0].shape[1];
                let factor = g[0].to_f64() * scale;
                let probs = std::mem::take(&mut self.saved[i]);
                let buf = self.grad_buf(*logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut buf[r * cols..(r + 1) * cols];
                    for (c, d) in row.iter_mut().enumerate() {
                        let p = probs[r * cols + c].to_f64();
                        let y = if c == t as usize { 1.0 } else { 0.0 };
                        *d += T::from_f64((p - y) * factor);
                    }
                }
                self.saved[i] = probs;
            }
            Op::Gather { table, ids } => {
                let cols = self.meta[table.0].shape[1];
                let buf = self.grad_buf(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut buf[id as usize * cols..(id as usize + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::LayerNorm { x, gain, bias } => self.layer_norm_backward(i, *x, *gain, *bias, g),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
            } => self.attention_backward(i, [*q, *k, *v], *heads, segments, g),
        }
        self.meta[i].op = op;
    }

    fn layer_norm_backward(&mut self, i: usize, x: Var, gain: Var, bias: Var, g: &[T]) {
        let (rows, cols) = (self.meta[x.0].shape[0], self.meta[x.0].shape[1]);
        let saved = std::mem::take(&mut self.saved[i]);
        let (xhat, rstd) = saved.split_at(rows * cols);
        if self.needs_grad(bias) || self.needs_grad(gain) {
            let mut gb = vec![0.0f64; cols];
            let mut gg = vec![0.0f64; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let gv = g[r * cols + c].to_f64();
                    gb[c] += gv;
                    gg[c] += gv * xhat[r * cols + c].to_f64();
                }
            }
            if self.needs_grad(bias) {
                for (d, a) in self.grad_buf(bias).iter_mut().zip(gb) {
                    *d += T::from_f64(a);
                }
            }
            if self.needs_grad(gain) {
                for (d, a) in self.grad_buf(gain).iter_mut().zip(gg) {
                    *d += T::from_f64(a);
                }
            }
        }
        if self.needs_grad(x) {
            let gain_v: Vec<f64> = self.values[gain.0].iter().map(|v| v.to_f64()).collect();
            let mut delta = vec![T::ZERO; rows * cols];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let gx: Vec<f64> = g[span.clone()]
                    .iter()
                    .zip(&gain_v)
                    .map(|(g, w)| g.to_f64() * w)
                    .collect();
                let xh = &xhat[span.clone()];
                let mean_g = gx.iter().sum::<f64>() / cols as f64;
                let mean_gx = gx.iter().zip(xh).map(|(a, b)| a * b.to_f64()).sum::<f64>() / cols as f64;
                let rs = rstd[r].to_f64();
                for c in 0..cols {
                    delta[r * cols + c] = T::from_f64(rs * (gx[c] - mean_g - xh[c].to_f64() * mean_gx));
                }
            }
            add_into(self.grad_buf(x), &delta);
        }
        self.saved[i] = saved;
    }

    fn attention_backward(&mut self, i: usize, qkv: [Var; 3], heads: usize, segments: &[usize], g: &[T]) {
        let [q, k, v] = qkv;
        let (n, d) = (self.meta[q.0].shape[0], self.meta[q.0].shape[1]);
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let probs = &self.saved[i];
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let mut dq = vec![0.0f64; n * d];
        let mut dk = vec![0.0f64; n * d];
        let mut dv = vec![0.0f64; n * d];
        let mut offset = 0;
        let mut pi = 0;
        for &len in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for r in 0..len {
                    let row = offset + r;
                    let p = &probs[pi..pi + len];
                    pi += len;
                    let go = &g[row * d + c0..row * d + c0 + dh];
                    // dp_j = go . v_j ; ds_j = p_j (dp_j - sum_j p_j dp_j)
                    let mut dp = vec![0.0f64; r + 1];
                    let mut weighted = 0.0;
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        let vj = &vv[(offset + j) * d + c0..(offset + j) * d + c0 + dh];
                        *dpj = go.iter().zip(vj).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        weighted += p[j].to_f64() * *dpj;
                        let pj = p[j].to_f64();
                        for (t, gov) in go.iter().enumerate() {
                            dv[(offset + j) * d + c0 + t] += pj * gov.to_f64();
                        }
                    }
                    for (j, dpj) in dp.iter().enumerate() {
                        let ds = p[j].to_f64() * (dpj - weighted) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[row * d + c0 + t] += ds * kv[(offset + j) * d + c0 + t].to_f64();
                            dk[(offset + j) * d + c0 + t] += ds * qv[row * d + c0 + t].to_f64();
                        }
                    }
                }
            }
            offset += len;
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs_grad(var) {
                for (d, a) in self.grad_buf(var).iter_mut().zip(delta) {
                    *d += T::from_f64(a);
                }
            }
        }
    }
}
