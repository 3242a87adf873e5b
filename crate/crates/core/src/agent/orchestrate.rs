use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{build_task_corpus, collect, CollectReport, MetricKind, TaskCorpus, TaskRegistry};
use super::sources::DataSource;
use super::store::RecordStore;
use crate::adaptation::{
    estimate_fisher, meta_adapt, meta_outer_step, train_task, FisherInfo, ReplayBuffer, TaskReport, TrainConfig,
};
use crate::base_lm::{generate_greedy, perplexity};
use crate::error::{Error, Result};
use crate::harness::metrics::{bleu4, code_accuracy, words};
use crate::pnn::{column_param_name, mix_seed, ProgressiveNetwork};
use crate::tensor::checkpoint::{write_atomic, TensorRecord};
use crate::tensor::Checkpoint;

/// Steps of one orchestration round, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Collect,
    Corpus,
    Register,
    Meta,
    Train,
    Refine,
    Fisher,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Collect,
        Stage::Corpus,
        Stage::Register,
        Stage::Meta,
        Stage::Train,
        Stage::Refine,
        Stage::Fisher,
        Stage::Evaluate,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub round: usize,
    pub tag: String,
    pub stage: Stage,
    /// Set when the stage had nothing to do.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// How new task tags map onto columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnMode {
    /// One new column per task; earlier columns freeze.
    #[default]
    Progressive,
    /// Every task trains the first column, which never freezes.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out answers scored by BLEU per dialog task.
    pub bleu_prompts: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bleu_prompts: 8,
            max_new_tokens: 48,
        }
    }
}

/// Halts a run right after `stage` of round `round`, as if the process had
/// been killed there.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopPoint {
    pub round: usize,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestrateConfig {
    pub train: TrainConfig,
    pub column_mode: ColumnMode,
    pub meta: bool,
    pub ewc: bool,
    pub replay: bool,
    pub lora: bool,
    /// After a new column trains, also fit LoRA residuals on every earlier
    /// column with the new task's data.
    pub lora_refine: bool,
    /// Records collected per source.
    pub collect_limit: usize,
    /// Overrides the metric picked from the tag name.
    pub metrics: BTreeMap<String, MetricKind>,
    pub eval: EvalConfig,
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(skip)]
    pub stop_after: Option<StopPoint>,
}

impl Default for OrchestrateConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            column_mode: ColumnMode::Progressive,
            meta: true,
            ewc: true,
            replay: true,
            lora: true,
            lora_refine: false,
            collect_limit: 200,
            metrics: BTreeMap::new(),
            eval: EvalConfig::default(),
            checkpoint_path: None,
            stop_after: None,
        }
    }
}

impl OrchestrateConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.lora_refine && !self.lora {
            return Err(Error::Config("lora_refine needs lora".into()));
        }
        if self.lora_refine && self.column_mode == ColumnMode::Shared {
            return Err(Error::Config("lora_refine needs progressive columns".into()));
        }
        if self.collect_limit == 0 {
            return Err(Error::Config("collect_limit must be at least 1".into()));
        }
        Ok(())
    }

    /// Explicit override, else code accuracy for tags mentioning code and
    /// BLEU for everything else.
    pub fn metric_for(&self, tag: &str) -> MetricKind {
        self.metrics.get(tag).copied().unwrap_or(if tag.contains("code") {
            MetricKind::CodeAccuracy
        } else {
            MetricKind::Bleu
        })
    }
}

/// Scores of one task at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tag: String,
    pub task_id: u32,
    pub column: usize,
    pub perplexity: f64,
    pub metric: MetricKind,
    pub metric_value: f64,
}

/// Everything one source contributed to the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub tag: String,
    pub task_id: Option<u32>,
    pub column_added: Option<usize>,
    pub collect: CollectReport,
    /// Highest record id visible to corpus building.
    pub fence: Option<u64>,
    pub corpus_hash: Option<String>,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub lora_targets: Vec<String>,
    pub meta_rounds: usize,
    pub training: Option<TaskReport>,
    pub refinement: Vec<TaskReport>,
    /// L2 distance the effective weights of each refined column moved,
    /// aligned with `refinement`.
    pub refinement_displacement: Vec<f64>,
    pub fisher_parameters: Vec<String>,
    pub evaluations: Vec<Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub round: usize,
    pub tag: String,
    pub stage: Stage,
    pub message: String,
}

/// The forgetting matrix: one round per source, each with an evaluation of
/// every task registered so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: OrchestrateConfig,
    pub rounds: Vec<RoundReport>,
    pub failure: Option<StageFailure>,
    pub halted_after: Option<StageRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn columns_added(&self) -> usize {
        self.rounds.iter().filter(|r| r.column_added.is_some()).count()
    }

    /// Perplexity shift of every evaluation against the most recent round
    /// that trained the same task, at or before it.
    pub fn deltas(&self) -> Vec<(usize, String, f64)> {
        let mut own: BTreeMap<&str, f64> = BTreeMap::new();
        let mut out = Vec::new();
        for r in &self.rounds {
            for e in &r.evaluations {
                if e.tag == r.tag {
                    own.insert(&e.tag, e.perplexity);
                }
                if let Some(&p) = own.get(e.tag.as_str()) {
                    out.push((r.round, e.tag.clone(), e.perplexity - p));
                }
            }
        }
        out
    }
}

/// Persisted run state after a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub stages: Vec<StageRecord>,
    pub registry: TaskRegistry,
    pub replay: ReplayBuffer,
    pub report: RunReport,
    pub tensors: BTreeMap<String, TensorRecord>,
}

const FISHER_PREFIX: &str = "fisher/";

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn last_stage(&self) -> Option<&StageRecord> {
        self.stages.last()
    }

    pub fn network(&self) -> Result<ProgressiveNetwork> {
        ProgressiveNetwork::from_checkpoint(&Checkpoint::from_records(&self.tensors)?)
    }

    /// Fisher estimates by column.
    pub fn fishers(&self) -> Result<BTreeMap<usize, FisherInfo>> {
        let ck = Checkpoint::from_records(&self.tensors)?;
        let columns: BTreeSet<usize> = ck
            .with_prefix(FISHER_PREFIX)
            .filter_map(|(rest, _)| rest.split_once('/').and_then(|(c, _)| c.parse().ok()))
            .collect();
        columns
            .into_iter()
            .map(|c| Ok((c, FisherInfo::read_from(&ck, &format!("{FISHER_PREFIX}{c}/"))?)))
            .collect()
    }
}

/// Agent state carried across rounds.
#[derive(Debug)]
pub struct AgentState {
    pub net: ProgressiveNetwork,
    pub registry: TaskRegistry,
    pub fishers: BTreeMap<usize, FisherInfo>,
    pub buffer: ReplayBuffer,
    pub corpora: BTreeMap<String, TaskCorpus>,
    pub stages: Vec<StageRecord>,
    pub report: RunReport,
    config: OrchestrateConfig,
}

enum Flow {
    Continue,
    Halt,
}

impl AgentState {
    pub fn new(net: ProgressiveNetwork, registry: TaskRegistry, config: OrchestrateConfig) -> Result<Self> {
        config.validate()?;
        if !net.base().model().is_frozen() {
            return Err(Error::Config("base model must be frozen".into()));
        }
        Ok(Self {
            net,
            registry,
            fishers: BTreeMap::new(),
            buffer: ReplayBuffer::new(config.train.replay_capacity),
            corpora: BTreeMap::new(),
            stages: Vec::new(),
            report: RunReport {
                seed: config.train.seed,
                config: config.clone(),
                rounds: Vec::new(),
                failure: None,
                halted_after: None,
            },
            config,
        })
    }

    /// Records collected by the next rounds.
    pub fn set_collect_limit(&mut self, limit: usize) {
        self.config.collect_limit = limit;
    }

    /// True once a failure or a stop point ended the run.
    pub fn finished(&self) -> bool {
        self.report.failure.is_some() || self.report.halted_after.is_some()
    }

    /// One collect/train/evaluate round for `source`. Stage failures end up
    /// in the report; only checkpoint I/O errors are returned.
    pub fn step(&mut self, store: &mut RecordStore, source: &mut dyn DataSource) -> Result<()> {
        if self.finished() {
            return Ok(());
        }
        let round = self.report.rounds.len();
        let tag = source.task_tag().to_owned();
        self.report.rounds.push(RoundReport {
            round,
            tag: tag.clone(),
            ..RoundReport::default()
        });
        let mut corpus: Option<TaskCorpus> = None;
        let mut trained_column: Option<usize> = None;
        for stage in Stage::ALL {
            let outcome = self.run_stage(stage, store, source, &mut corpus, &mut trained_column);
            match outcome {
                Ok(skipped) => {
                    self.stages.push(StageRecord {
                        round,
                        tag: tag.clone(),
                        stage,
                        skipped,
                    });
                    if let Flow::Halt = self.commit(round, stage)? {
                        return Ok(());
                    }
                }
                Err(e) => {
                    self.report.failure = Some(StageFailure {
                        round,
                        tag,
                        stage,
                        message: e.to_string(),
                    });
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    fn commit(&mut self, round: usize, stage: Stage) -> Result<Flow> {
        let halt = self.config.stop_after == Some(StopPoint { round, stage });
        if halt {
            self.report.halted_after = self.stages.last().cloned();
        }
        if let Some(path) = self.config.checkpoint_path.clone() {
            self.save(&path)?;
        }
        Ok(if halt { Flow::Halt } else { Flow::Continue })
    }

    pub fn checkpoint(&self) -> RunCheckpoint {
        let mut ck = self.net.to_checkpoint();
        for (c, f) in &self.fishers {
            f.write_to(&mut ck, &format!("{FISHER_PREFIX}{c}/"));
        }
        RunCheckpoint {
            stages: self.stages.clone(),
            registry: self.registry.clone(),
            replay: self.buffer.clone(),
            report: self.report.clone(),
            tensors: ck.to_records(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(&self.checkpoint())?.as_bytes())
    }

    fn round_mut(&mut self) -> &mut RoundReport {
        self.report.rounds.last_mut().expect("round started")
    }

    fn run_stage(
        &mut self,
        stage: Stage,
        store: &mut RecordStore,
        source: &mut dyn DataSource,
        corpus: &mut Option<TaskCorpus>,
        trained_column: &mut Option<usize>,
    ) -> Result<Option<String>> {
        let tag = source.task_tag().to_owned();
        match stage {
            Stage::Collect => {
                let report = collect(store, source, self.config.collect_limit);
                let fence = store.last_id();
                let r = self.round_mut();
                r.collect = report;
                r.fence = fence;
                Ok(None)
            }
            Stage::Corpus => {
                let fence = self.round_mut().fence;
                let c = build_task_corpus(store, &tag, self.net.max_seq_len(), fence)?;
                let r = self.round_mut();
                r.corpus_hash = Some(c.hash.clone());
                r.train_sequences = c.train.len();
                r.heldout_sequences = c.heldout.len();
                *corpus = Some(c);
                Ok(None)
            }
            Stage::Register => self.register(&tag),
            Stage::Meta => self.meta_warmup(corpus.as_ref().expect("corpus stage ran")),
            Stage::Train => {
                let c = corpus.as_ref().expect("corpus stage ran");
                let entry = self.registry.get(&tag).expect("registered").clone();
                let fisher = if self.config.ewc {
                    self.fishers.get(&entry.column)
                } else {
                    None
                };
                let mut cfg = self.config.train.clone();
                if !self.config.replay {
                    cfg.replay_fraction = 0.0;
                    cfg.replay_push = 0;
                }
                let report = train_task(&mut self.net, entry.task_id, &c.train, &c.heldout, &cfg, fisher, &mut self.buffer)?;
                *trained_column = Some(entry.column);
                self.round_mut().training = Some(report);
                self.corpora.insert(tag, c.clone());
                Ok(None)
            }
            Stage::Refine => self.refine(corpus.as_ref().expect("corpus stage ran")),
            Stage::Fisher => {
                if !self.config.ewc {
                    return Ok(Some("ewc disabled".into()));
                }
                let column = trained_column.expect("train stage ran");
                let c = corpus.as_ref().expect("corpus stage ran");
                let entry = self.registry.get(&tag).expect("registered");
                let names: BTreeSet<String> = ["w1", "b1", "w2", "b2"]
                    .iter()
                    .map(|f| column_param_name(column, f))
                    .collect();
                let fi = estimate_fisher(&self.net, &names, entry.task_id, &c.heldout, self.config.train.fisher_samples)?;
                self.round_mut().fisher_parameters = names.into_iter().collect();
                self.fishers.insert(column, fi);
                Ok(None)
            }
            Stage::Evaluate => {
                let rows = self.evaluate()?;
                self.round_mut().evaluations = rows;
                Ok(None)
            }
        }
    }

    fn register(&mut self, tag: &str) -> Result<Option<String>> {
        if let Some(entry) = self.registry.get(tag).cloned() {
            self.round_mut().task_id = Some(entry.task_id);
            let frozen = self.net.column(entry.column)?.is_frozen();
            if !frozen {
                return Ok(Some("column still trainable".into()));
            }
            if !self.config.lora {
                return Err(Error::Config(format!(
                    "column {} of `{tag}` is frozen and lora is disabled",
                    entry.column
                )));
            }
            let targets = self.attach_fresh_lora(entry.column)?;
            self.round_mut().lora_targets = targets;
            return Ok(None);
        }
        let task_id = self.registry.next_id();
        let (column, added) = match self.config.column_mode {
            ColumnMode::Shared if self.net.num_columns() > 0 => {
                self.net.register_alias(task_id, 0)?;
                (0, None)
            }
            _ => {
                let c = self.net.add_column(task_id)?;
                (c, Some(c))
            }
        };
        let metric = self.config.metric_for(tag);
        self.registry.register(tag, column, metric)?;
        let r = self.round_mut();
        r.task_id = Some(task_id);
        r.column_added = added;
        Ok(None)
    }

    /// Attaches new LoRA factors to `column`'s matrices, merging any earlier
    /// frozen ones into the weights first.
    fn attach_fresh_lora(&mut self, column: usize) -> Result<Vec<String>> {
        let rank = self.config.train.lora_rank;
        let scale = self.config.train.lora_scale;
        let mut targets = Vec::new();
        for field in ["w1", "w2"] {
            let target = column_param_name(column, field);
            match self.net.lora(&target).map(|l| l.is_frozen()) {
                Some(false) => {}
                Some(true) => {
                    self.net.merge_lora(&target)?;
                    self.net.attach_lora(&target, rank, scale)?;
                }
                None => {
                    self.net.attach_lora(&target, rank, scale)?;
                }
            }
            targets.push(target);
        }
        Ok(targets)
    }

    fn meta_warmup(&mut self, corpus: &TaskCorpus) -> Result<Option<String>> {
        if !self.config.meta {
            return Ok(Some("meta disabled".into()));
        }
        let round = self.report.rounds.last().expect("round started");
        if round.column_added.is_none() {
            return Ok(Some("no new column".into()));
        }
        let task_id = round.task_id.expect("registered");
        let t = &self.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, 0x3e7a ^ u64::from(task_id)));
        let support_len = t.meta_support.min(corpus.train.len());
        for _ in 0..t.meta_rounds {
            let mut snapshots = Vec::with_capacity(t.meta_tasks);
            for _ in 0..t.meta_tasks {
                let mut idx: Vec<usize> = (0..corpus.train.len()).collect();
                idx.shuffle(&mut rng);
                let support: Vec<Vec<u32>> = idx[..support_len].iter().map(|&i| corpus.train[i].clone()).collect();
                snapshots.push(meta_adapt(&self.net, task_id, &support, t.meta_inner_steps, t.meta_inner_lr)?);
            }
            if !snapshots.is_empty() {
                meta_outer_step(&mut self.net, &snapshots, t.meta_outer_lr)?;
            }
        }
        self.round_mut().meta_rounds = t.meta_rounds;
        Ok(None)
    }

    /// LoRA refinement of every earlier column on the new task's data, held
    /// in place by that column's Fisher anchor when EWC is on.
    fn refine(&mut self, corpus: &TaskCorpus) -> Result<Option<String>> {
        if !self.config.lora_refine {
            return Ok(Some("refinement disabled".into()));
        }
        let Some(new_column) = self.report.rounds.last().and_then(|r| r.column_added) else {
            return Ok(Some("no new column".into()));
        };
        let prior: Vec<(u32, usize, String)> = self
            .registry
            .entries()
            .iter()
            .filter(|e| e.column < new_column)
            .map(|e| (e.task_id, e.column, e.tag.clone()))
            .collect();
        let mut cfg = self.config.train.clone();
        cfg.replay_push = 0;
        if !self.config.replay {
            cfg.replay_fraction = 0.0;
        }
        let mut seen = BTreeSet::new();
        for (task_id, column, tag) in prior {
            if !seen.insert(column) {
                continue;
            }
            let before = self.column_weights(column)?;
            self.attach_fresh_lora(column)?;
            let fisher = if self.config.ewc {
                self.fishers.get(&column)
            } else {
                None
            };
            let heldout = self.corpora.get(&tag).map(|c| c.heldout.clone()).unwrap_or_default();
            let report = train_task(&mut self.net, task_id, &corpus.train, &heldout, &cfg, fisher, &mut self.buffer)?;
            let after = self.column_weights(column)?;
            let moved = before
                .iter()
                .zip(&after)
                .flat_map(|(a, b)| a.values().iter().zip(b.values()))
                .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                .sum::<f64>()
                .sqrt();
            let r = self.round_mut();
            r.refinement.push(report);
            r.refinement_displacement.push(moved);
        }
        Ok(None)
    }

    fn column_weights(&self, column: usize) -> Result<Vec<crate::tensor::DenseArray>> {
        ["w1", "b1", "w2", "b2"]
            .iter()
            .map(|f| self.net.effective_weight(&column_param_name(column, f)))
            .collect()
    }

    /// Perplexity and task metric for every registered task.
    pub fn evaluate(&self) -> Result<Vec<Evaluation>> {
        let mut rows = Vec::new();
        for e in self.registry.entries() {
            let Some(c) = self.corpora.get(&e.tag) else {
                continue;
            };
            let view = self.net.task_view(e.task_id);
            let ppl = perplexity(&view, &c.heldout)?;
            let value = match e.metric {
                MetricKind::CodeAccuracy => code_accuracy(&view, &c.heldout)?,
                MetricKind::Bleu => self.dialog_bleu(e.task_id, &c.heldout_texts)?,
            };
            rows.push(Evaluation {
                tag: e.tag.clone(),
                task_id: e.task_id,
                column: e.column,
                perplexity: ppl,
                metric: e.metric,
                metric_value: value,
            });
        }
        Ok(rows)
    }

    /// Mean BLEU of greedy answers to held-out `Q: ... A: ` prompts; 0 when
    /// no held-out text has that shape.
    fn dialog_bleu(&self, task_id: u32, texts: &[String]) -> Result<f64> {
        let pairs = answer_prompts(texts, self.net.max_seq_len());
        let pairs: Vec<_> = pairs.into_iter().take(self.config.eval.bleu_prompts).collect();
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let view = self.net.task_view_uncached(task_id);
        let mut total = 0.0;
        for (prompt, reference) in &pairs {
            let out = generate_greedy(&view, prompt.as_bytes(), self.config.eval.max_new_tokens)?;
            let text = String::from_utf8_lossy(&out);
            let hyp = text.split('\n').next().unwrap_or("");
            total += bleu4(&words(hyp), &[words(reference)])?;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// `(prompt, reference)` pairs: text up to and including each `A: `, and the
/// rest of that line. Prompts that do not fit `max_seq_len` are dropped.
pub fn answer_prompts(texts: &[String], max_seq_len: usize) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for t in texts {
        let mut line_start = 0;
        for line in t.split('\n') {
            if let Some(i) = line.find("A: ") {
                let cut = line_start + i + 3;
                let reference = &line[i + 3..];
                if cut + 2 < max_seq_len && !reference.is_empty() {
                    out.push((t[..cut].to_owned(), reference.to_owned()));
                }
            }
            line_start += line.len() + 1;
        }
    }
    out
}

/// Runs one round per source, in order, on `net`.
///
/// A failing stage is recorded in the report and later sources are not
/// processed. `net` and `registry` reflect the state after the last stage
/// that completed.
pub fn orchestrate(
    net: &mut ProgressiveNetwork,
    store: &mut RecordStore,
    registry: &mut TaskRegistry,
    sources: &mut [Box<dyn DataSource>],
    config: &OrchestrateConfig,
) -> Result<RunReport> {
    let mut state = AgentState::new(net.clone(), registry.clone(), config.clone())?;
    for source in sources.iter_mut() {
        state.step(store, source.as_mut())?;
        if state.finished() {
            break;
        }
    }
    *net = state.net;
    *registry = state.registry;
    Ok(state.report)
}
