use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adaptation::TrainConfig;
use crate::agent::{
    AgentState, ColumnMode, DataSource, EvalConfig, OrchestrateConfig, RecordStore, RunReport, SteppedClock,
    SyntheticCodeSource, SyntheticDialogSource, SyntheticProseSource, TaskRegistry,
};
use crate::error::{Error, Result};
use crate::pnn::{FrozenBase, ProgressiveNetwork};
use crate::tensor::checkpoint::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Dialog,
    Code,
    Prose,
}

/// One task of an experiment: a synthetic source and how much to collect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub tag: String,
    pub kind: SourceKind,
    pub records: usize,
    #[serde(default)]
    pub data_seed: u64,
    /// Dialog fact-table variant.
    #[serde(default)]
    pub variant: u64,
}

impl TaskSpec {
    pub fn source(&self) -> Box<dyn DataSource> {
        // Sources may reject duplicates, so they get headroom past `records`.
        let max = self.records * 20 + 100;
        match self.kind {
            SourceKind::Dialog => Box::new(SyntheticDialogSource::with_variant(
                &self.tag,
                self.data_seed,
                max,
                self.variant,
            )),
            SourceKind::Code => Box::new(SyntheticCodeSource::new(&self.tag, self.data_seed, max)),
            SourceKind::Prose => Box::new(SyntheticProseSource::new(&self.tag, self.data_seed, max)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub pnn: bool,
    pub ewc: bool,
    pub lora: bool,
    pub meta: bool,
    pub replay: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            pnn: true,
            ewc: true,
            lora: true,
            meta: true,
            replay: true,
        }
    }
}

impl Toggles {
    pub const OFF: Toggles = Toggles {
        pnn: false,
        ewc: false,
        lora: false,
        meta: false,
        replay: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label; derived from the toggles when absent.
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSpec>,
    pub toggles: Toggles,
    /// One shared, never frozen column trained on every task in turn.
    pub baseline_mode: bool,
    pub lora_refine: bool,
    pub alpha: f32,
    pub store_cap: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seeds: vec![0],
            tasks: vec![
                TaskSpec {
                    tag: "dialog".into(),
                    kind: SourceKind::Dialog,
                    records: 200,
                    data_seed: 1,
                    variant: 0,
                },
                TaskSpec {
                    tag: "code".into(),
                    kind: SourceKind::Code,
                    records: 200,
                    data_seed: 2,
                    variant: 0,
                },
            ],
            toggles: Toggles::default(),
            baseline_mode: false,
            lora_refine: false,
            alpha: 0.7,
            store_cap: 1000,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// The standard-transformer baseline: every toggle off.
    pub fn baseline(mut self) -> Self {
        self.baseline_mode = true;
        self.toggles = Toggles::OFF;
        self.lora_refine = false;
        self
    }

    /// Rejects conflicting toggles before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let t = self.toggles;
        if self.baseline_mode && (t.pnn || t.ewc || t.lora || t.meta || t.replay) {
            return Err(Error::Config(
                "baseline_mode trains one shared column; turn every toggle off".into(),
            ));
        }
        if t.lora && !t.pnn {
            return Err(Error::Config("lora adapts frozen columns and needs pnn".into()));
        }
        if self.lora_refine && !t.lora {
            return Err(Error::Config("lora_refine needs lora".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        for task in &self.tasks {
            if task.records == 0 {
                return Err(Error::Config(format!("task `{}` collects no records", task.tag)));
            }
        }
        let total: usize = self.tasks.iter().map(|t| t.records).sum();
        if total > self.store_cap {
            return Err(Error::Config(format!(
                "tasks collect {total} records but store_cap is {}",
                self.store_cap
            )));
        }
        self.orchestrate_config(0).validate()
    }

    pub fn variant(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if self.baseline_mode {
            return "baseline".into();
        }
        let t = self.toggles;
        let mut parts = vec![if t.pnn { "pnn" } else { "shared" }];
        for (on, label) in [(t.ewc, "ewc"), (t.lora, "lora"), (t.meta, "meta"), (t.replay, "replay")] {
            if on {
                parts.push(label);
            }
        }
        if self.lora_refine {
            parts.push("refine");
        }
        parts.join("+")
    }

    /// Orchestrator settings for one seed. Task records are collected in
    /// full, so `collect_limit` is the largest task size.
    pub fn orchestrate_config(&self, seed: u64) -> OrchestrateConfig {
        let t = self.toggles;
        OrchestrateConfig {
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            column_mode: if t.pnn {
                ColumnMode::Progressive
            } else {
                ColumnMode::Shared
            },
            meta: t.meta,
            ewc: t.ewc,
            replay: t.replay,
            lora: t.lora,
            lora_refine: self.lora_refine,
            collect_limit: self.tasks.iter().map(|t| t.records).max().unwrap_or(1),
            metrics: BTreeMap::new(),
            eval: self.eval.clone(),
            checkpoint_path: None,
            stop_after: None,
        }
    }
}

/// One row of the forgetting matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCell {
    pub checkpoint: usize,
    pub task: String,
    pub perplexity: f64,
    pub metric_kind: String,
    pub metric_value: f64,
    /// Perplexity minus the value right after the task's own training.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub variant: String,
    pub seed: u64,
    pub cells: Vec<ForgettingCell>,
}

impl ForgettingReport {
    pub fn from_run(variant: &str, report: &RunReport) -> Self {
        let deltas = report.deltas();
        let mut cells = Vec::new();
        for r in &report.rounds {
            for e in &r.evaluations {
                let delta = deltas
                    .iter()
                    .find(|(c, t, _)| *c == r.round && *t == e.tag)
                    .map_or(0.0, |x| x.2);
                cells.push(ForgettingCell {
                    checkpoint: r.round,
                    task: e.tag.clone(),
                    perplexity: e.perplexity,
                    metric_kind: e.metric.as_str().to_owned(),
                    metric_value: e.metric_value,
                    delta,
                });
            }
        }
        Self {
            variant: variant.to_owned(),
            seed: report.seed,
            cells,
        }
    }

    /// Delta of `task` at the last checkpoint that evaluated it.
    pub fn final_delta(&self, task: &str) -> Option<f64> {
        self.cells.iter().rev().find(|c| c.task == task).map(|c| c.delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: RunReport,
    pub forgetting: ForgettingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: String,
    pub runs: Vec<SeedRun>,
    /// Median final delta per task over seeds.
    pub median_final_delta: BTreeMap<String, f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Runs the orchestrator once per seed on a fresh store and network built
/// over `base`. Failed runs are returned as errors.
pub fn run_experiment(config: &ExperimentConfig, base: &Arc<FrozenBase>) -> Result<ExperimentReport> {
    config.validate()?;
    let variant = config.variant();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let scratch = tempfile::tempdir()?;
        let store_path = match &config.output_dir {
            Some(out) => out.join(&variant).join(format!("seed-{seed}")).join("store.jsonl"),
            None => scratch.path().join("store.jsonl"),
        };
        let mut store = RecordStore::create(&store_path, config.store_cap, Box::new(SteppedClock::default()))?;
        let mut net = ProgressiveNetwork::new(Arc::clone(base), config.alpha, seed)?;
        let mut registry = TaskRegistry::new();
        let mut sources: Vec<Box<dyn DataSource>> = config.tasks.iter().map(TaskSpec::source).collect();
        let report = run_sources(&mut net, &mut store, &mut registry, &mut sources, config, seed)?;
        if let Some(f) = &report.failure {
            return Err(Error::Config(format!(
                "seed {seed}: stage {:?} of `{}` failed: {}",
                f.stage, f.tag, f.message
            )));
        }
        if let Some(out) = &config.output_dir {
            let path = out.join(&variant).join(format!("seed-{seed}")).join("report.json");
            write_atomic(&path, report.to_json()?.as_bytes())?;
        }
        let forgetting = ForgettingReport::from_run(&variant, &report);
        runs.push(SeedRun {
            seed,
            report,
            forgetting,
        });
    }
    let mut median_final_delta = BTreeMap::new();
    for task in &config.tasks {
        let mut v: Vec<f64> = runs.iter().filter_map(|r| r.forgetting.final_delta(&task.tag)).collect();
        if let Some(m) = median(&mut v) {
            median_final_delta.insert(task.tag.clone(), m);
        }
    }
    Ok(ExperimentReport {
        variant,
        runs,
        median_final_delta,
    })
}

/// Each task collects exactly its own `records` count.
fn run_sources(
    net: &mut ProgressiveNetwork,
    store: &mut RecordStore,
    registry: &mut TaskRegistry,
    sources: &mut [Box<dyn DataSource>],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunReport> {
    let mut state = AgentState::new(net.clone(), registry.clone(), config.orchestrate_config(seed))?;
    for (source, task) in sources.iter_mut().zip(&config.tasks) {
        state.set_collect_limit(task.records);
        state.step(store, source.as_mut())?;
        if state.finished() {
            break;
        }
    }
    *net = state.net;
    *registry = state.registry;
    Ok(state.report)
}

/// The ablation grid: the full system with LoRA refinement, each component
/// removed in turn, strict freezing, and the baseline.
pub fn ablation_variants(template: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let full = ExperimentConfig {
        name: None,
        toggles: Toggles::default(),
        baseline_mode: false,
        lora_refine: true,
        ..template.clone()
    };
    let with = |f: fn(&mut ExperimentConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    vec![
        full.clone(),
        with(|c| c.toggles.ewc = false),
        with(|c| c.toggles.replay = false),
        with(|c| c.toggles.meta = false),
        with(|c| {
            c.lora_refine = false;
            c.name = Some("pnn-strict".into());
        }),
        full.clone().baseline(),
    ]
}

pub fn run_ablation(template: &ExperimentConfig, base: &Arc<FrozenBase>) -> Result<Vec<ExperimentReport>> {
    let variants = ablation_variants(template);
    for v in &variants {
        v.validate()?;
    }
    variants.iter().map(|v| run_experiment(v, base)).collect()
}
