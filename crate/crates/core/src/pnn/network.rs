use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use super::column::{
    adapter_name, check_alpha, column_hidden_on_tape, column_logits_on_tape, column_param_name, fuse_on_tape,
    lateral_on_tape, Column, LateralAdapter, COLUMN_FIELDS,
};
use crate::adaptation::LoraAdapter;
use crate::base_lm::{BaseModel, NextTokenModel};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, DenseArray, ParamRefs, Tape, Var};

/// Named parameter values detached from any network.
pub type ParamSnapshot = BTreeMap<String, DenseArray>;

/// Base outputs for one sequence.
#[derive(Debug)]
pub struct BaseFeatures {
    pub hidden: DenseArray,
    pub logits: DenseArray,
}

/// A frozen base model plus a memo of its outputs per token sequence.
///
/// Networks built on the same `Arc<FrozenBase>` share the memo.
#[derive(Debug)]
pub struct FrozenBase {
    model: BaseModel,
    cache: Mutex<HashMap<Vec<u32>, Arc<BaseFeatures>>>,
}

impl FrozenBase {
    pub fn new(mut model: BaseModel) -> Arc<Self> {
        model.freeze();
        Arc::new(Self {
            model,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &BaseModel {
        &self.model
    }

    /// Memoized `forward`; the stored arrays are the exact outputs of an
    /// uncached call.
    pub fn features(&self, tokens: &[u32]) -> Result<Arc<BaseFeatures>> {
        if let Some(f) = self.cache.lock().expect("cache lock").get(tokens) {
            return Ok(Arc::clone(f));
        }
        let (hidden, logits) = self.model.forward(tokens)?;
        let f = Arc::new(BaseFeatures { hidden, logits });
        self.cache
            .lock()
            .expect("cache lock")
            .insert(tokens.to_vec(), Arc::clone(&f));
        Ok(f)
    }

    pub fn cached_sequences(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn clear_cache(&self) {
        self.cache.lock().expect("cache lock").clear();
    }
}

/// Which parameters a recorded graph differentiates.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphOptions<'a> {
    /// Names of leaves that receive gradients; `None` records a constant graph.
    pub grad: Option<&'a BTreeSet<String>>,
    /// Bind LoRA-adapted matrices as single merged leaves named after the
    /// target instead of `W + (s/r) B A`.
    pub materialize_lora: bool,
}

impl GraphOptions<'_> {
    fn wants(&self, name: &str) -> bool {
        self.grad.is_some_and(|g| g.contains(name))
    }
}

/// Nodes of one task's forward pass.
#[derive(Clone, Debug)]
pub struct TaskGraph {
    /// `h_0 ..= h_k` for the active column `k`.
    pub hiddens: Vec<Var>,
    pub pnn_logits: Var,
    pub logits: Var,
    /// Effective value of every bound column weight and adapter, by name.
    pub effective: BTreeMap<String, Var>,
}

/// Intermediate arrays of a single `forward_task` call.
#[derive(Clone, Debug)]
pub struct TaskOutputs {
    pub h_base: DenseArray,
    pub base_logits: DenseArray,
    pub hiddens: Vec<DenseArray>,
    pub pnn_logits: DenseArray,
    pub logits: DenseArray,
}

/// Frozen base, ordered task columns, lateral adapters and the fusion weight.
#[derive(Clone, Debug)]
pub struct ProgressiveNetwork {
    base: Arc<FrozenBase>,
    columns: Vec<Column>,
    adapters: BTreeMap<(usize, usize), LateralAdapter>,
    tasks: BTreeMap<u32, usize>,
    lora: BTreeMap<String, LoraAdapter>,
    alpha: f32,
    init_seed: u64,
}

/// SplitMix64 finalizer; spreads `(seed, salt)` into independent seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_salt(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

impl ProgressiveNetwork {
    pub fn new(base: Arc<FrozenBase>, alpha: f32, init_seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            base,
            columns: Vec::new(),
            adapters: BTreeMap::new(),
            tasks: BTreeMap::new(),
            lora: BTreeMap::new(),
            alpha,
            init_seed,
        })
    }

    /// Freezes `model` and wraps it with a fresh feature memo.
    pub fn from_base(model: BaseModel, alpha: f32, init_seed: u64) -> Result<Self> {
        Self::new(FrozenBase::new(model), alpha, init_seed)
    }

    pub fn base(&self) -> &Arc<FrozenBase> {
        &self.base
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.base.model().config().d_model
    }

    pub fn vocab(&self) -> usize {
        self.base.model().config().vocab_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.base.model().config().max_seq_len
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> Result<&Column> {
        self.columns.get(idx).ok_or(Error::CountMismatch {
            what: "columns (index out of range)",
            expected: idx + 1,
            got: self.columns.len(),
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LateralAdapter> {
        self.adapters.values()
    }

    pub fn adapter(&self, source: usize, dest: usize) -> Option<&LateralAdapter> {
        self.adapters.get(&(source, dest))
    }

    /// Adapters feeding into `dest`, ordered by source.
    pub fn adapters_into(&self, dest: usize) -> impl Iterator<Item = &LateralAdapter> {
        self.adapters.values().filter(move |a| a.dest == dest)
    }

    pub fn tasks(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.tasks.iter().map(|(&t, &c)| (t, c))
    }

    pub fn task_column(&self, task_id: u32) -> Result<usize> {
        self.tasks.get(&task_id).copied().ok_or(Error::UnknownTask(task_id))
    }

    /// Freezes every existing column, adapter and LoRA factor, then appends a
    /// trainable column with identity adapters from each prior column.
    pub fn add_column(&mut self, task_id: u32) -> Result<usize> {
        if self.tasks.contains_key(&task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        for c in &mut self.columns {
            c.freeze();
        }
        for a in self.adapters.values_mut() {
            a.u.set_requires_grad(false);
            a.u.clear_grad();
        }
        for l in self.lora.values_mut() {
            l.freeze();
        }
        let k = self.columns.len();
        let d = self.d_model();
        self.columns.push(Column::new(
            task_id,
            d,
            d,
            self.vocab(),
            mix_seed(self.init_seed, k as u64),
        ));
        for i in 0..k {
            self.adapters.insert((i, k), LateralAdapter::identity(i, k, d));
        }
        self.tasks.insert(task_id, k);
        Ok(k)
    }

    /// Routes `task_id` through an existing column without adding one.
    pub fn register_alias(&mut self, task_id: u32, column: usize) -> Result<()> {
        if self.tasks.contains_key(&task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        self.column(column)?;
        self.tasks.insert(task_id, column);
        Ok(())
    }

    pub fn freeze_column(&mut self, idx: usize) -> Result<()> {
        self.column(idx)?;
        self.columns[idx].freeze();
        for a in self.adapters.values_mut().filter(|a| a.dest == idx) {
            a.u.set_requires_grad(false);
            a.u.clear_grad();
        }
        Ok(())
    }

    /// `sum_i h_i U_i` over the adapters into `column_idx`; the empty sum is
    /// a `[rows, d_col]` zero array.
    pub fn lateral_sum(&self, column_idx: usize, prior_hiddens: &[DenseArray], rows: usize) -> Result<DenseArray> {
        if prior_hiddens.len() != column_idx {
            return Err(Error::CountMismatch {
                what: "prior hidden states",
                expected: column_idx,
                got: prior_hiddens.len(),
            });
        }
        self.column(column_idx)?;
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(column_idx);
        for (i, h) in prior_hiddens.iter().enumerate() {
            if h.shape()[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "lateral_sum",
                    lhs: h.shape().to_vec(),
                    rhs: vec![rows, self.d_model()],
                });
            }
            let h = tape.constant(h);
            let u = tape.constant(&self.adapters[&(i, column_idx)].u);
            terms.push((h, u));
        }
        Ok(match lateral_on_tape(&mut tape, &terms)? {
            Some(v) => tape.array(v),
            None => DenseArray::zeros(&[rows, self.columns[column_idx].d_col()]),
        })
    }

    fn bind_weight(
        &self,
        tape: &mut Tape,
        column: usize,
        field: &str,
        opts: GraphOptions<'_>,
        effective: &mut BTreeMap<String, Var>,
    ) -> Result<Var> {
        let name = column_param_name(column, field);
        let col = &self.columns[column];
        let w = match field {
            "w1" => &col.w1,
            "b1" => &col.b1,
            "w2" => &col.w2,
            _ => &col.b2,
        };
        let var = match self.lora.get(&name) {
            Some(l) if opts.materialize_lora => tape.param(&name, &l.effective(w)?, opts.wants(&name)),
            Some(l) => {
                let base = tape.param(&name, w, false);
                let a = tape.param(&l.a_name(), &l.a, opts.wants(&l.a_name()));
                let b = tape.param(&l.b_name(), &l.b, opts.wants(&l.b_name()));
                let ba = tape.matmul(b, a)?;
                let delta = tape.scale(ba, l.factor());
                tape.add(base, delta)?
            }
            None => tape.param(&name, w, opts.wants(&name)),
        };
        effective.insert(name, var);
        Ok(var)
    }

    /// Binds the effective value of one column weight or adapter by name.
    pub fn bind_named(&self, tape: &mut Tape, name: &str, opts: GraphOptions<'_>) -> Result<Var> {
        if let Some(rest) = name.strip_prefix("adapter/") {
            let parsed = rest
                .split_once("->")
                .and_then(|(s, d)| Some((s.parse().ok()?, d.parse().ok()?)));
            let a = parsed
                .and_then(|k| self.adapters.get(&k))
                .ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
            return Ok(tape.param(name, &a.u, opts.wants(name)));
        }
        let (column, field) = parse_column_target(name).map_err(|_| Error::UnknownParameter(name.to_owned()))?;
        if column >= self.columns.len() || !COLUMN_FIELDS.contains(&field) {
            return Err(Error::UnknownParameter(name.to_owned()));
        }
        let mut sink = BTreeMap::new();
        self.bind_weight(tape, column, field, opts, &mut sink)
    }

    /// Records columns `0..=column` over precomputed base outputs.
    pub fn task_graph(
        &self,
        tape: &mut Tape,
        h_base: Var,
        base_logits: Var,
        column: usize,
        opts: GraphOptions<'_>,
    ) -> Result<TaskGraph> {
        self.column(column)?;
        let mut hiddens: Vec<Var> = Vec::with_capacity(column + 1);
        let mut effective = BTreeMap::new();
        for k in 0..=column {
            let mut terms = Vec::with_capacity(k);
            for (i, &h) in hiddens.iter().enumerate() {
                let name = adapter_name(i, k);
                let u = tape.param(&name, &self.adapters[&(i, k)].u, opts.wants(&name));
                effective.insert(name, u);
                terms.push((h, u));
            }
            let x = match lateral_on_tape(tape, &terms)? {
                Some(lat) => tape.add(h_base, lat)?,
                None => h_base,
            };
            let w1 = self.bind_weight(tape, k, "w1", opts, &mut effective)?;
            let b1 = self.bind_weight(tape, k, "b1", opts, &mut effective)?;
            hiddens.push(column_hidden_on_tape(tape, x, w1, b1)?);
        }
        let w2 = self.bind_weight(tape, column, "w2", opts, &mut effective)?;
        let b2 = self.bind_weight(tape, column, "b2", opts, &mut effective)?;
        let pnn_logits = column_logits_on_tape(tape, hiddens[column], w2, b2)?;
        let logits = fuse_on_tape(tape, base_logits, pnn_logits, self.alpha)?;
        Ok(TaskGraph {
            hiddens,
            pnn_logits,
            logits,
            effective,
        })
    }

    /// Cached base outputs for `batch`, stacked row-wise.
    pub fn stacked_features<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<(DenseArray, DenseArray)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        let mut rows = 0;
        for seq in batch {
            let f = self.base.features(seq.as_ref())?;
            hidden.extend_from_slice(f.hidden.values());
            logits.extend_from_slice(f.logits.values());
            rows += f.hidden.shape()[0];
        }
        Ok((
            DenseArray::new(vec![rows, self.d_model()], hidden)?,
            DenseArray::new(vec![rows, self.vocab()], logits)?,
        ))
    }

    fn outputs_from(&self, h_base: DenseArray, base_logits: DenseArray, task_id: u32) -> Result<TaskOutputs> {
        let column = self.task_column(task_id)?;
        let mut tape = Tape::new();
        let h = tape.constant(&h_base);
        let l = tape.constant(&base_logits);
        let g = self.task_graph(&mut tape, h, l, column, GraphOptions::default())?;
        Ok(TaskOutputs {
            hiddens: g.hiddens.iter().map(|&v| tape.array(v)).collect(),
            pnn_logits: tape.array(g.pnn_logits),
            logits: tape.array(g.logits),
            h_base,
            base_logits,
        })
    }

    /// Full pass including a fresh base forward.
    pub fn forward_task_detailed(&self, tokens: &[u32], task_id: u32) -> Result<TaskOutputs> {
        self.task_column(task_id)?;
        let (h, l) = self.base.model().forward(tokens)?;
        self.outputs_from(h, l, task_id)
    }

    /// Fused logits `[len, vocab]`, recomputing the base forward.
    pub fn forward_task(&self, tokens: &[u32], task_id: u32) -> Result<DenseArray> {
        Ok(self.forward_task_detailed(tokens, task_id)?.logits)
    }

    /// Same values as [`forward_task`](Self::forward_task), reusing memoized
    /// base outputs.
    pub fn forward_task_cached(&self, tokens: &[u32], task_id: u32) -> Result<DenseArray> {
        self.task_column(task_id)?;
        let f = self.base.features(tokens)?;
        Ok(self.outputs_from(f.hidden.clone(), f.logits.clone(), task_id)?.logits)
    }

    pub fn task_view(&self, task_id: u32) -> TaskView<'_> {
        TaskView {
            net: self,
            task_id,
            cached: true,
        }
    }

    /// View that never touches the base memo; used for generation where
    /// every prefix is new.
    pub fn task_view_uncached(&self, task_id: u32) -> TaskView<'_> {
        TaskView {
            net: self,
            task_id,
            cached: false,
        }
    }

    /// Column, adapter and LoRA parameters (the base is excluded).
    pub fn params(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (k, c) in self.columns.iter().enumerate() {
            for (f, p) in COLUMN_FIELDS.iter().zip(c.fields()) {
                out.push((column_param_name(k, f), p));
            }
        }
        for a in self.adapters.values() {
            out.push((a.name(), &a.u));
        }
        for l in self.lora.values() {
            out.push((l.a_name(), &l.a));
            out.push((l.b_name(), &l.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_> {
        let mut out: ParamRefs<'_> = Vec::new();
        for (k, c) in self.columns.iter_mut().enumerate() {
            for (f, p) in COLUMN_FIELDS.iter().zip(c.fields_mut()) {
                out.push((column_param_name(k, f), p));
            }
        }
        for a in self.adapters.values_mut() {
            out.push((adapter_name(a.source, a.dest), &mut a.u));
        }
        for l in self.lora.values_mut() {
            out.extend(l.params_mut());
        }
        out
    }

    /// Parameters that currently accept updates.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Copies of the named parameters.
    pub fn snapshot(&self, names: &BTreeSet<String>) -> Result<ParamSnapshot> {
        let all: BTreeMap<String, &DenseArray> = self.params().into_iter().collect();
        names
            .iter()
            .map(|n| {
                let p = all.get(n).ok_or_else(|| Error::UnknownParameter(n.clone()))?;
                Ok((n.clone(), p.detached()))
            })
            .collect()
    }

    /// Overwrites parameter values from `snapshot`; flags are kept.
    pub fn load_snapshot(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        let mut params = self.params_mut();
        for (name, value) in snapshot {
            let (_, p) = params
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_snapshot",
                    lhs: p.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            p.values_mut().copy_from_slice(value.values());
        }
        Ok(())
    }

    /// Column weight with any LoRA residual folded in.
    pub fn effective_weight(&self, name: &str) -> Result<DenseArray> {
        let all: BTreeMap<String, &DenseArray> = self.params().into_iter().collect();
        let w = all.get(name).ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
        match self.lora.get(name) {
            Some(l) => l.effective(w),
            None => Ok(w.detached()),
        }
    }

    pub fn lora(&self, target: &str) -> Option<&LoraAdapter> {
        self.lora.get(target)
    }

    pub fn lora_adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.lora.values()
    }

    /// LoRA factors attached to weights of `column`.
    pub fn lora_on_column(&self, column: usize) -> impl Iterator<Item = &LoraAdapter> {
        let prefix = format!("col{column}/");
        self.lora.values().filter(move |l| l.target.starts_with(&prefix))
    }

    /// Attaches a zero-initialized low-rank residual to a frozen column's
    /// `w1` or `w2`.
    pub fn attach_lora(&mut self, target: &str, rank: usize, scale: f32) -> Result<&LoraAdapter> {
        let (column, field) = parse_column_target(target)?;
        let col = self.column(column)?;
        if field != "w1" && field != "w2" {
            return Err(Error::Lora(format!("`{target}` is not a column weight matrix")));
        }
        if !col.frozen {
            return Err(Error::Lora(format!("`{target}` belongs to a trainable column")));
        }
        if self.lora.contains_key(target) {
            return Err(Error::Lora(format!("`{target}` is already adapted")));
        }
        let w = if field == "w1" { &col.w1 } else { &col.w2 };
        let (rows, cols) = w.dims2().expect("column weights are matrices");
        let seed = mix_seed(self.init_seed, name_salt(target));
        let adapter = LoraAdapter::new(target, rows, cols, rank, scale, seed)?;
        Ok(self.lora.entry(target.to_owned()).or_insert(adapter))
    }

    /// Folds the residual into the frozen weight and removes the adapter.
    pub fn merge_lora(&mut self, target: &str) -> Result<()> {
        let adapter = self
            .lora
            .remove(target)
            .ok_or_else(|| Error::Lora(format!("`{target}` has no adapter")))?;
        let (column, field) = parse_column_target(target)?;
        let col = &mut self.columns[column];
        let w = if field == "w1" { &mut col.w1 } else { &mut col.w2 };
        let merged = adapter.effective(w)?;
        w.values_mut().copy_from_slice(merged.values());
        Ok(())
    }

    /// Hex digest over base and network parameters.
    pub fn digest(&self) -> String {
        let mut all = self.base.model().params();
        all.extend(self.params());
        crate::tensor::digest(all)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.base.model().to_checkpoint();
        for (name, p) in self.params() {
            ck.insert(name, p);
        }
        let scalar = |v: f32| DenseArray::scalar(v);
        ck.insert("meta/pnn/alpha", &scalar(self.alpha));
        let seed: Vec<f32> = (0..4).map(|i| ((self.init_seed >> (16 * i)) & 0xffff) as f32).collect();
        ck.insert("meta/pnn/init_seed", &DenseArray::vector(seed).expect("4 values"));
        if !self.columns.is_empty() {
            let rows: Vec<Vec<f32>> = self
                .columns
                .iter()
                .map(|c| vec![c.task_id as f32, f32::from(u8::from(c.frozen))])
                .collect();
            ck.insert("meta/pnn/columns", &DenseArray::from_rows(&rows).expect("rectangular"));
        }
        if !self.tasks.is_empty() {
            let rows: Vec<Vec<f32>> = self.tasks.iter().map(|(&t, &c)| vec![t as f32, c as f32]).collect();
            ck.insert("meta/pnn/tasks", &DenseArray::from_rows(&rows).expect("rectangular"));
        }
        for l in self.lora.values() {
            let meta = vec![l.rank as f32, l.scale, f32::from(u8::from(l.frozen))];
            ck.insert(format!("meta/pnn/lora/{}", l.target), &DenseArray::vector(meta).expect("3 values"));
        }
        ck
    }

    /// Rebuilds a network, including a fresh frozen base, from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let base = FrozenBase::new(BaseModel::from_checkpoint(ck)?);
        Self::from_checkpoint_with_base(ck, base)
    }

    /// Rebuilds the columns from `ck` on top of an already loaded base.
    pub fn from_checkpoint_with_base(ck: &Checkpoint, base: Arc<FrozenBase>) -> Result<Self> {
        let alpha = ck.get("meta/pnn/alpha")?.values()[0];
        let seed = ck
            .get("meta/pnn/init_seed")?
            .values()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
        let mut net = Self::new(base, alpha, seed)?;
        if ck.contains("meta/pnn/columns") {
            let cols = ck.get("meta/pnn/columns")?;
            let n = cols.shape()[0];
            for k in 0..n {
                let row = cols.row(k);
                let get = |f: &str| ck.get(&column_param_name(k, f)).map(DenseArray::detached);
                let mut col = Column::from_weights(row[0] as u32, get("w1")?, get("b1")?, get("w2")?, get("b2")?)?;
                if row[1] != 0.0 {
                    col.freeze();
                }
                for i in 0..k {
                    let name = adapter_name(i, k);
                    let mut u = ck.get(&name)?.detached();
                    u.set_requires_grad(!col.frozen);
                    net.adapters.insert((i, k), LateralAdapter { source: i, dest: k, u });
                }
                net.columns.push(col);
            }
        }
        if ck.contains("meta/pnn/tasks") {
            let tasks = ck.get("meta/pnn/tasks")?;
            for r in 0..tasks.shape()[0] {
                let row = tasks.row(r);
                net.tasks.insert(row[0] as u32, row[1] as usize);
            }
        }
        let lora_meta: Vec<(String, Vec<f32>)> = ck
            .with_prefix("meta/pnn/lora/")
            .map(|(t, v)| (t.to_owned(), v.values().to_vec()))
            .collect();
        for (target, meta) in lora_meta {
            let mut l = LoraAdapter {
                target: target.clone(),
                rank: meta[0] as usize,
                scale: meta[1],
                a: ck.get(&format!("lora/{target}/a"))?.detached().with_requires_grad(true),
                b: ck.get(&format!("lora/{target}/b"))?.detached().with_requires_grad(true),
                frozen: false,
            };
            if meta[2] != 0.0 {
                l.freeze();
            }
            net.lora.insert(target, l);
        }
        Ok(net)
    }
}

fn parse_column_target(target: &str) -> Result<(usize, &str)> {
    let err = || Error::Lora(format!("`{target}` does not name a column parameter"));
    let rest = target.strip_prefix("col").ok_or_else(err)?;
    let (idx, field) = rest.split_once('/').ok_or_else(err)?;
    let idx = idx.parse().map_err(|_| err())?;
    Ok((idx, field))
}

/// A network routed through one task's column.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    net: &'a ProgressiveNetwork,
    task_id: u32,
    cached: bool,
}

impl NextTokenModel for TaskView<'_> {
    fn logits(&self, tokens: &[u32]) -> Result<DenseArray> {
        if self.cached {
            self.net.forward_task_cached(tokens, self.task_id)
        } else {
            self.net.forward_task(tokens, self.task_id)
        }
    }

    fn max_seq_len(&self) -> usize {
        self.net.max_seq_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_lm::{BaseConfig, BOS, EOS};

    fn net() -> ProgressiveNetwork {
        let base = BaseModel::new(BaseConfig {
            max_seq_len: 16,
            init_seed: 3,
            ..BaseConfig::default()
        })
        .unwrap();
        ProgressiveNetwork::from_base(base, 0.7, 11).unwrap()
    }

    #[test]
    fn add_column_counts_adapters_and_freezes() {
        let mut n = net();
        assert_eq!(n.add_column(0).unwrap(), 0);
        assert_eq!(n.adapters().count(), 0);
        assert_eq!(n.add_column(1).unwrap(), 1);
        assert_eq!(n.adapters().count(), 1);
        assert!(n.column(0).unwrap().is_frozen());
        n.add_column(2).unwrap();
        assert_eq!(n.add_column(3).unwrap(), 3);
        let sources: Vec<usize> = n.adapters_into(3).map(|a| a.source()).collect();
        assert_eq!(sources, vec![0, 1, 2]);
        assert!(matches!(n.add_column(3), Err(Error::DuplicateTask(3))));
    }

    #[test]
    fn trainable_set_is_new_column_and_its_adapters() {
        let mut n = net();
        n.add_column(0).unwrap();
        n.add_column(1).unwrap();
        let expected: BTreeSet<String> = ["col1/w1", "col1/b1", "col1/w2", "col1/b2", "adapter/0->1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(n.trainable_names(), expected);
    }

    #[test]
    fn cached_and_uncached_forward_agree() {
        let mut n = net();
        n.add_column(0).unwrap();
        let toks = [BOS, 1, 2, 3, EOS];
        let a = n.forward_task(&toks, 0).unwrap();
        let b = n.forward_task_cached(&toks, 0).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(matches!(n.forward_task(&toks, 9), Err(Error::UnknownTask(9))));
    }

    #[test]
    fn task_zero_ignores_later_columns() {
        let mut n = net();
        n.add_column(0).unwrap();
        n.add_column(1).unwrap();
        let toks = [BOS, 5, 6, 7];
        let before = n.forward_task(&toks, 0).unwrap();
        for (name, p) in n.params_mut() {
            if name.starts_with("col1/") {
                p.values_mut().iter_mut().for_each(|v| *v = 3.0);
            }
        }
        assert_eq!(before.values(), n.forward_task(&toks, 0).unwrap().values());
    }

    #[test]
    fn lora_attach_rules_and_transparency() {
        let mut n = net();
        n.add_column(0).unwrap();
        assert!(n.attach_lora("col0/w1", 4, 1.0).is_err(), "trainable column");
        n.add_column(1).unwrap();
        let toks = [BOS, 9, 8, 7];
        let before = n.forward_task(&toks, 0).unwrap();
        n.attach_lora("col0/w1", 4, 1.0).unwrap();
        assert_eq!(before.values(), n.forward_task(&toks, 0).unwrap().values());
        assert!(n.attach_lora("col0/w1", 4, 1.0).is_err(), "twice");
        assert!(n.attach_lora("col0/b1", 4, 1.0).is_err(), "bias");
        assert!(n.trainable_names().contains("lora/col0/w1/a"));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut n = net();
        n.add_column(0).unwrap();
        n.add_column(1).unwrap();
        n.attach_lora("col0/w2", 4, 1.0).unwrap();
        let back = ProgressiveNetwork::from_checkpoint(&Checkpoint::from_json(&n.to_checkpoint().to_json().unwrap()).unwrap())
            .unwrap();
        assert_eq!(n.digest(), back.digest());
        assert_eq!(n.trainable_names(), back.trainable_names());
        let toks = [BOS, 1, 2];
        for t in [0, 1] {
            assert_eq!(n.forward_task(&toks, t).unwrap().values(), back.forward_task(&toks, t).unwrap().values());
        }
    }
}
