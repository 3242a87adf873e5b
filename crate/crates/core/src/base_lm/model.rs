use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, DenseArray, ParamRefs, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            init_seed: 0,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be {VOCAB_SIZE} for the byte tokenizer"
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must evenly divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: DenseArray,
    ln1_bias: DenseArray,
    wq: DenseArray,
    wk: DenseArray,
    wv: DenseArray,
    wo: DenseArray,
    ln2_gain: DenseArray,
    ln2_bias: DenseArray,
    ff_in: DenseArray,
    ff_in_bias: DenseArray,
    ff_out: DenseArray,
    ff_out_bias: DenseArray,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gain",
    "ln1_bias",
    "wq",
    "wk",
    "wv",
    "wo",
    "ln2_gain",
    "ln2_bias",
    "ff_in",
    "ff_in_bias",
    "ff_out",
    "ff_out_bias",
];

impl Block {
    fn fields(&self) -> [&DenseArray; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut DenseArray; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }
}

/// Small pre-norm causal transformer over byte tokens.
#[derive(Clone, Debug)]
pub struct BaseModel {
    config: BaseConfig,
    tok_emb: DenseArray,
    pos_emb: DenseArray,
    blocks: Vec<Block>,
    ln_f_gain: DenseArray,
    ln_f_bias: DenseArray,
    out_proj: DenseArray,
    frozen: bool,
}

/// Output of a base forward pass over packed sequences.
#[derive(Clone, Copy, Debug)]
pub struct BaseGraph {
    /// Final normalized hidden states, `[positions, d_model]`.
    pub hidden: Var,
    /// `hidden * out_proj`, `[positions, vocab]`.
    pub logits: Var,
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> DenseArray {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng) as f32).collect();
    DenseArray::new(shape.to_vec(), values).expect("consistent shape")
}

impl BaseModel {
    pub fn new(config: BaseConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let ff = 4 * d;
        let resid_std = 0.02 / ((2 * config.n_layers) as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: DenseArray::filled(&[d], 1.0),
                ln1_bias: DenseArray::zeros(&[d]),
                wq: normal(&[d, d], 0.02, &mut rng),
                wk: normal(&[d, d], 0.02, &mut rng),
                wv: normal(&[d, d], 0.02, &mut rng),
                wo: normal(&[d, d], resid_std, &mut rng),
                ln2_gain: DenseArray::filled(&[d], 1.0),
                ln2_bias: DenseArray::zeros(&[d]),
                ff_in: normal(&[d, ff], 0.02, &mut rng),
                ff_in_bias: DenseArray::zeros(&[ff]),
                ff_out: normal(&[ff, d], resid_std, &mut rng),
                ff_out_bias: DenseArray::zeros(&[d]),
            })
            .collect();
        let mut model = Self {
            tok_emb: normal(&[v, d], 0.02, &mut rng),
            pos_emb: normal(&[config.max_seq_len, d], 0.02, &mut rng),
            blocks,
            ln_f_gain: DenseArray::filled(&[d], 1.0),
            ln_f_bias: DenseArray::zeros(&[d]),
            out_proj: normal(&[d, v], 0.02, &mut rng),
            config,
            frozen: false,
        };
        model.set_trainable(true);
        Ok(model)
    }

    pub fn config(&self) -> &BaseConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.max_seq_len)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing is one-way: a frozen model never accepts another update.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, p) in self.params_mut_unchecked() {
            p.set_requires_grad(on);
            p.clear_grad();
        }
    }

    pub fn params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![
            ("base/tok_emb".to_string(), &self.tok_emb),
            ("base/pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, p) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("base/block{i}/{field}"), p));
            }
        }
        out.push(("base/ln_f_gain".into(), &self.ln_f_gain));
        out.push(("base/ln_f_bias".into(), &self.ln_f_bias));
        out.push(("base/out_proj".into(), &self.out_proj));
        out
    }

    fn params_mut_unchecked(&mut self) -> ParamRefs<'_> {
        let mut out: ParamRefs<'_> = vec![
            ("base/tok_emb".to_string(), &mut self.tok_emb),
            ("base/pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, p) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                out.push((format!("base/block{i}/{field}"), p));
            }
        }
        out.push(("base/ln_f_gain".into(), &mut self.ln_f_gain));
        out.push(("base/ln_f_bias".into(), &mut self.ln_f_bias));
        out.push(("base/out_proj".into(), &mut self.out_proj));
        out
    }

    /// Mutable parameters for training; refused once frozen.
    pub fn params_mut(&mut self) -> Result<ParamRefs<'_>> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        Ok(self.params_mut_unchecked())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// SHA-256 over every parameter name and its raw bytes.
    pub fn digest(&self) -> String {
        crate::tensor::digest(self.params())
    }

    pub fn output_projection(&self) -> &DenseArray {
        &self.out_proj
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let max = self.config.max_seq_len;
        if tokens.is_empty() || tokens.len() > max {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass over `batch` (packed position-major) on `tape`.
    /// Parameters are differentiable only while the model is trainable.
    pub fn forward_on_tape<S: AsRef<[u32]>>(&self, tape: &mut Tape, batch: &[S]) -> Result<BaseGraph> {
        self.record(tape, batch, !self.frozen)
    }

    fn record<S: AsRef<[u32]>>(&self, tape: &mut Tape, batch: &[S], grad: bool) -> Result<BaseGraph> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for seq in batch {
            let seq = seq.as_ref();
            self.check_tokens(seq)?;
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len() as u32);
            segments.push(seq.len());
        }
        let bind = |tape: &mut Tape, name: &str, p: &DenseArray| tape.param(name, p, grad && p.requires_grad());

        let tok = bind(tape, "base/tok_emb", &self.tok_emb);
        let pos = bind(tape, "base/pos_emb", &self.pos_emb);
        let te = tape.gather_rows(tok, &ids)?;
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (i, b) in self.blocks.iter().enumerate() {
            let mut v = Vec::with_capacity(12);
            for (field, p) in BLOCK_FIELDS.iter().zip(b.fields()) {
                v.push(bind(tape, &format!("base/block{i}/{field}"), p));
            }
            let [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, ffi, ffib, ffo, ffob]: [Var; 12] =
                v.try_into().expect("twelve block fields");

            let h = tape.layer_norm(x, ln1g, ln1b)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let vv = tape.matmul(h, wv)?;
            let att = tape.causal_attention(q, k, vv, self.config.n_heads, &segments)?;
            let proj = tape.matmul(att, wo)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, ln2g, ln2b)?;
            let f = tape.matmul(h2, ffi)?;
            let f = tape.add_row(f, ffib)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, ffo)?;
            let f = tape.add_row(f, ffob)?;
            x = tape.add(x, f)?;
        }
        let gain = bind(tape, "base/ln_f_gain", &self.ln_f_gain);
        let bias = bind(tape, "base/ln_f_bias", &self.ln_f_bias);
        let hidden = tape.layer_norm(x, gain, bias)?;
        let out = bind(tape, "base/out_proj", &self.out_proj);
        let logits = tape.matmul(hidden, out)?;
        Ok(BaseGraph { hidden, logits })
    }

    /// `(hidden [len, d_model], logits [len, vocab])` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<(DenseArray, DenseArray)> {
        let mut tape = Tape::new();
        let g = self.record(&mut tape, &[tokens], false)?;
        Ok((tape.array(g.hidden), tape.array(g.logits)))
    }

    /// Final normalized hidden states for one sequence.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<DenseArray> {
        Ok(self.forward(tokens)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, p) in self.params() {
            ck.insert(name, p);
        }
        let c = &self.config;
        let meta = [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.max_seq_len,
            self.frozen as usize,
        ]
        .map(|v| v as f32);
        ck.insert(
            "meta/base/config",
            &DenseArray::vector(meta.to_vec()).expect("non-empty"),
        );
        // 16-bit limbs stay exact in f32.
        let seed = (0..4).map(|i| ((c.init_seed >> (16 * i)) & 0xffff) as f32).collect();
        ck.insert("meta/base/init_seed", &DenseArray::vector(seed).expect("non-empty"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get("meta/base/config")?.values();
        if meta.len() != 6 {
            return Err(Error::Checkpoint("meta/base/config must hold 6 values".into()));
        }
        let config = BaseConfig {
            vocab_size: meta[0] as usize,
            d_model: meta[1] as usize,
            n_layers: meta[2] as usize,
            n_heads: meta[3] as usize,
            max_seq_len: meta[4] as usize,
            init_seed: match ck.get("meta/base/init_seed") {
                Ok(limbs) => limbs
                    .values()
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))),
                Err(_) => 0,
            },
        };
        let mut model = Self::new(config)?;
        for (name, p) in model.params_mut_unchecked() {
            let stored = ck.get(&name)?;
            if stored.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load checkpoint",
                    lhs: p.shape().to_vec(),
                    rhs: stored.shape().to_vec(),
                });
            }
            p.values_mut().copy_from_slice(stored.values());
        }
        if meta[5] != 0.0 {
            model.freeze();
        }
        Ok(model)
    }

    #[doc(hidden)]
    pub fn zero_embeddings_and_projection(&mut self) {
        for p in [&mut self.tok_emb, &mut self.pos_emb, &mut self.out_proj] {
            p.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
