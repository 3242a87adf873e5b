//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the code under test except to read
//! inputs and to evaluate the function being checked.
#![allow(dead_code)]

use pnn_core::tensor::{DenseArray, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_f64(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DenseArray::new(shape.to_vec(), v).unwrap()
}

pub fn random_f32(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> DenseArray {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DenseArray::new(shape.to_vec(), v).unwrap()
}

/// Values bounded away from zero, for checks across the relu kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    DenseArray::new(shape.to_vec(), v).unwrap()
}

/// Worst relative error between the tape gradient and central differences
/// for every input element. `build` records a scalar loss from the leaves.
pub fn gradcheck<F>(inputs: &[DenseArray<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    const H: f64 = 1e-5;
    let eval = |xs: &[DenseArray<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x)).collect();
        let out = build(&mut t, &vars);
        t.scalar(out)
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces any node to a scalar through a fixed random weighting so every
/// output element reaches the loss with a distinct coefficient.
pub fn weighted_sum(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = t.shape(v).to_vec();
    let w = random_f64(&mut rng(seed), &shape, -1.0, 1.0);
    let w = t.constant(&w);
    let p = t.mul(v, w).unwrap();
    t.sum(p)
}

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(a: &DenseArray) -> Matrix {
    let (r, c) = a.dims2().expect("matrix");
    (0..r)
        .map(|i| (0..c).map(|j| f64::from(a.values()[i * c + j])).collect())
        .collect()
}

pub fn to_vector(a: &DenseArray) -> Vec<f64> {
    a.values().iter().map(|&v| f64::from(v)).collect()
}

/// `x W + b`, one row at a time.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(xi, wi)| xi * wi[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn matmul(x: &Matrix, w: &Matrix) -> Matrix {
    let zeros = vec![0.0; w[0].len()];
    affine(x, w, &zeros)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_abs_diff(a: &Matrix, b: &DenseArray) -> f64 {
    let b = to_matrix(b);
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Straight-line column hidden state: `relu(x W1 + b1)`.
pub fn oracle_hidden(x: &Matrix, w1: &Matrix, b1: &[f64]) -> Matrix {
    relu(&affine(x, w1, b1))
}

/// Straight-line column logits: `h W2 + b2`.
pub fn oracle_logits(h: &Matrix, w2: &Matrix, b2: &[f64]) -> Matrix {
    affine(h, w2, b2)
}

/// `sum_i h_i U_i`; zeros of width `width` when there are no terms.
pub fn oracle_lateral(hiddens: &[Matrix], adapters: &[Matrix], rows: usize, width: usize) -> Matrix {
    let mut acc = vec![vec![0.0; width]; rows];
    for (h, u) in hiddens.iter().zip(adapters) {
        acc = add(&acc, &matmul(h, u));
    }
    acc
}

pub fn oracle_fuse(base: &Matrix, pnn: &Matrix, alpha: f64) -> Matrix {
    base.iter()
        .zip(pnn)
        .map(|(b, p)| b.iter().zip(p).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
        .collect()
}

/// Row-wise log-softmax negative log-likelihood of the next token.
pub fn oracle_perplexity(logits: &[Matrix], seqs: &[Vec<u32>]) -> f64 {
    let mut nll = 0.0;
    let mut n = 0usize;
    for (l, s) in logits.iter().zip(seqs) {
        for i in 0..s.len() - 1 {
            let row = &l[i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            nll += lse - row[s[i + 1] as usize];
            n += 1;
        }
    }
    (nll / n as f64).exp()
}

pub const GRAD_OPS: [&str; 15] = [
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "matmul",
    "relu",
    "log",
    "softmax_rows",
    "sum",
    "mean",
    "cross_entropy",
    "gather_rows",
    "layer_norm",
    "causal_attention",
];

/// Worst relative gradient error of `op` on one random instance.
pub fn gradcheck_op(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows = r.random_range(1..5);
    let cols = r.random_range(1..6);
    let m = |r: &mut ChaCha8Rng| random_f64(r, &[rows, cols], -1.0, 1.0);
    let ws = seed ^ 0x5eed;
    match op {
        "add" | "sub" | "mul" => {
            let inputs = [m(&mut r), m(&mut r)];
            gradcheck(&inputs, |t, v| {
                let out = match op {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }
                .unwrap();
                weighted_sum(t, out, ws)
            })
        }
        "add_row" => {
            let inputs = [m(&mut r), random_f64(&mut r, &[cols], -1.0, 1.0)];
            gradcheck(&inputs, |t, v| {
                let out = t.add_row(v[0], v[1]).unwrap();
                weighted_sum(t, out, ws)
            })
        }
        "scale" => {
            let f = r.random_range(-2.0..2.0);
            gradcheck(&[m(&mut r)], |t, v| {
                let out = t.scale(v[0], f);
                weighted_sum(t, out, ws)
            })
        }
        "matmul" => {
            let inner = r.random_range(1..5);
            let inputs = [
                random_f64(&mut r, &[rows, inner], -1.0, 1.0),
                random_f64(&mut r, &[inner, cols], -1.0, 1.0),
            ];
            gradcheck(&inputs, |t, v| {
                let out = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, out, ws)
            })
        }
        "relu" => gradcheck(&[away_from_zero(&mut r, &[rows, cols])], |t, v| {
            let out = t.relu(v[0]);
            weighted_sum(t, out, ws)
        }),
        "log" => gradcheck(&[random_f64(&mut r, &[rows, cols], 0.3, 2.0)], |t, v| {
            let out = t.log(v[0]);
            weighted_sum(t, out, ws)
        }),
        "softmax_rows" => gradcheck(&[random_f64(&mut r, &[rows, cols], -2.0, 2.0)], |t, v| {
            let out = t.softmax_rows(v[0]).unwrap();
            weighted_sum(t, out, ws)
        }),
        "sum" => gradcheck(&[m(&mut r)], |t, v| {
            let w = random_f64(&mut rng(ws), &[rows, cols], -1.0, 1.0);
            let w = t.constant(&w);
            let p = t.mul(v[0], w).unwrap();
            t.sum(p)
        }),
        "mean" => gradcheck(&[m(&mut r)], |t, v| {
            let w = random_f64(&mut rng(ws), &[rows, cols], -1.0, 1.0);
            let w = t.constant(&w);
            let p = t.mul(v[0], w).unwrap();
            t.mean(p)
        }),
        "cross_entropy" => {
            let vocab = r.random_range(2..7);
            let targets: Vec<Option<u32>> = (0..rows)
                .map(|i| {
                    // keep at least one live target
                    if i > 0 && r.random_bool(0.25) {
                        None
                    } else {
                        Some(r.random_range(0..vocab as u32))
                    }
                })
                .collect();
            let reduction = if r.random_bool(0.5) {
                pnn_core::tensor::Reduction::Mean
            } else {
                pnn_core::tensor::Reduction::Sum
            };
            gradcheck(&[random_f64(&mut r, &[rows, vocab], -2.0, 2.0)], |t, v| {
                t.cross_entropy(v[0], &targets, reduction).unwrap()
            })
        }
        "gather_rows" => {
            let table_rows = r.random_range(1..6);
            let n = r.random_range(1..8);
            let ids: Vec<u32> = (0..n).map(|_| r.random_range(0..table_rows as u32)).collect();
            gradcheck(&[random_f64(&mut r, &[table_rows, cols], -1.0, 1.0)], |t, v| {
                let out = t.gather_rows(v[0], &ids).unwrap();
                weighted_sum(t, out, ws)
            })
        }
        "layer_norm" => {
            let cols = r.random_range(2..7);
            let inputs = [
                random_f64(&mut r, &[rows, cols], -2.0, 2.0),
                random_f64(&mut r, &[cols], 0.5, 1.5),
                random_f64(&mut r, &[cols], -0.5, 0.5),
            ];
            gradcheck(&inputs, |t, v| {
                let out = t.layer_norm(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, out, ws)
            })
        }
        "causal_attention" => {
            let heads = r.random_range(1..3);
            let d = heads * r.random_range(1..4);
            let nseg = r.random_range(1..3);
            let segments: Vec<usize> = (0..nseg).map(|_| r.random_range(1..4)).collect();
            let n: usize = segments.iter().sum();
            let inputs = [
                random_f64(&mut r, &[n, d], -1.0, 1.0),
                random_f64(&mut r, &[n, d], -1.0, 1.0),
                random_f64(&mut r, &[n, d], -1.0, 1.0),
            ];
            gradcheck(&inputs, |t, v| {
                let out = t.causal_attention(v[0], v[1], v[2], heads, &segments).unwrap();
                weighted_sum(t, out, ws)
            })
        }
        other => panic!("no gradient check for {other}"),
    }
}

use pnn_core::base_lm::{BaseConfig, BaseModel};
use pnn_core::pnn::{combined_hidden, fuse_logits, ParamSnapshot, ProgressiveNetwork};

pub fn tiny_base_config(init_seed: u64) -> BaseConfig {
    BaseConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        init_seed,
        ..BaseConfig::default()
    }
}

/// A network over a randomly initialized tiny base with `columns` columns
/// whose weights, biases and adapters are all drawn at random.
pub fn random_network(seed: u64, columns: usize) -> ProgressiveNetwork {
    let mut r = rng(seed);
    let base = BaseModel::new(tiny_base_config(seed)).unwrap();
    let alpha = r.random_range(0.0f32..=1.0);
    let mut net = ProgressiveNetwork::from_base(base, alpha, seed).unwrap();
    for t in 0..columns {
        net.add_column(t as u32).unwrap();
    }
    let mut snap = ParamSnapshot::new();
    for (name, p) in net.params() {
        snap.insert(name, random_f32(&mut r, p.shape(), -0.5, 0.5));
    }
    net.load_snapshot(&snap).unwrap();
    net
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = r.random_range(1..=max_len);
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Straight-line forward pass of one task over given base outputs.
pub fn oracle_forward(net: &ProgressiveNetwork, h_base: &Matrix, base_logits: &Matrix, column: usize) -> Matrix {
    let rows = h_base.len();
    let width = net.d_model();
    let mut hiddens: Vec<Matrix> = Vec::new();
    let mut last_logits = Vec::new();
    for k in 0..=column {
        let adapters: Vec<Matrix> = (0..k)
            .map(|i| to_matrix(&net.effective_weight(&format!("adapter/{i}->{k}")).unwrap()))
            .collect();
        let lateral = oracle_lateral(&hiddens, &adapters, rows, width);
        let x = add(h_base, &lateral);
        let w = |f: &str| net.effective_weight(&format!("col{k}/{f}")).unwrap();
        let h = oracle_hidden(&x, &to_matrix(&w("w1")), &to_vector(&w("b1")));
        if k == column {
            last_logits = oracle_logits(&h, &to_matrix(&w("w2")), &to_vector(&w("b2")));
        }
        hiddens.push(h);
    }
    oracle_fuse(base_logits, &last_logits, f64::from(net.alpha()))
}

/// Worst absolute error of each column equation against its oracle on one
/// random instance.
pub fn equation_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed ^ 0xe9);
    let columns = r.random_range(1..=3);
    let net = random_network(seed, columns);
    let tokens = random_tokens(&mut r, net.vocab(), net.max_seq_len());
    let rows = tokens.len();
    let d = net.d_model();
    let k = r.random_range(0..columns);
    let col = net.column(k).unwrap();
    let mut out = Vec::new();

    let x = random_f32(&mut r, &[rows, d], -1.0, 1.0);
    let h = col.hidden(&x).unwrap();
    let want = oracle_hidden(&to_matrix(&x), &to_matrix(col.w1()), &to_vector(col.b1()));
    out.push(("column_hidden", max_abs_diff(&want, &h)));

    let hin = random_f32(&mut r, &[rows, d], 0.0, 1.0);
    let want = oracle_logits(&to_matrix(&hin), &to_matrix(col.w2()), &to_vector(col.b2()));
    out.push(("column_logits", max_abs_diff(&want, &col.logits(&hin).unwrap())));

    let prior: Vec<DenseArray> = (0..k).map(|_| random_f32(&mut r, &[rows, d], 0.0, 1.0)).collect();
    let adapters: Vec<Matrix> = (0..k)
        .map(|i| to_matrix(net.adapter(i, k).unwrap().matrix()))
        .collect();
    let want = oracle_lateral(&prior.iter().map(to_matrix).collect::<Vec<_>>(), &adapters, rows, d);
    out.push(("lateral_sum", max_abs_diff(&want, &net.lateral_sum(k, &prior, rows).unwrap())));

    let a = random_f32(&mut r, &[rows, d], -1.0, 1.0);
    let b = random_f32(&mut r, &[rows, d], -1.0, 1.0);
    let want = add(&to_matrix(&a), &to_matrix(&b));
    out.push(("combined_hidden", max_abs_diff(&want, &combined_hidden(&a, &b).unwrap())));

    let v = net.vocab();
    let lb = random_f32(&mut r, &[rows, v], -3.0, 3.0);
    let lp = random_f32(&mut r, &[rows, v], -3.0, 3.0);
    let alpha = r.random_range(0.0f32..=1.0);
    let want = oracle_fuse(&to_matrix(&lb), &to_matrix(&lp), f64::from(alpha));
    out.push(("fuse_logits", max_abs_diff(&want, &fuse_logits(&lb, &lp, alpha).unwrap())));

    let (h_base, base_logits) = net.base().model().forward(&tokens).unwrap();
    let want = oracle_forward(&net, &to_matrix(&h_base), &to_matrix(&base_logits), k);
    out.push(("forward_task", max_abs_diff(&want, &net.forward_task(&tokens, k as u32).unwrap())));
    out
}

use std::sync::Arc;

use pnn_core::adaptation::TrainConfig;
use pnn_core::agent::{DataSource, OrchestrateConfig, RecordStore, SteppedClock, SyntheticCodeSource, SyntheticDialogSource};
use pnn_core::pnn::FrozenBase;

/// Randomly initialized, frozen base large enough for short records.
pub fn small_frozen_base(seed: u64) -> Arc<FrozenBase> {
    FrozenBase::new(
        BaseModel::new(BaseConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            init_seed: seed,
            ..BaseConfig::default()
        })
        .unwrap(),
    )
}

/// A few seconds of training per task at most.
pub fn quick_orchestrate_config(seed: u64) -> OrchestrateConfig {
    OrchestrateConfig {
        train: TrainConfig {
            micro_batch: 8,
            accumulation_steps: 1,
            epochs: 1,
            base_lr: 3e-3,
            meta_inner_lr: 0.1,
            meta_support: 4,
            fisher_samples: 8,
            seed,
            ..TrainConfig::default()
        },
        collect_limit: 30,
        eval: pnn_core::agent::EvalConfig {
            bleu_prompts: 2,
            max_new_tokens: 8,
        },
        ..OrchestrateConfig::default()
    }
}

pub fn store_in(dir: &std::path::Path, name: &str, cap: usize) -> RecordStore {
    RecordStore::create(dir.join(name), cap, Box::new(SteppedClock::default())).unwrap()
}

pub fn dialog(tag: &str, seed: u64) -> Box<dyn DataSource> {
    Box::new(SyntheticDialogSource::new(tag, seed, 1000))
}

pub fn code(tag: &str, seed: u64) -> Box<dyn DataSource> {
    Box::new(SyntheticCodeSource::new(tag, seed, 1000))
}
