//! Data collection into a capped record store, corpus building and the
//! collect/train/evaluate orchestrator.

mod clean;
mod orchestrate;
mod pipeline;
mod sources;
mod store;

pub use clean::clean_text;
pub use orchestrate::{
    answer_prompts, orchestrate, AgentState, ColumnMode, EvalConfig, Evaluation, OrchestrateConfig, RoundReport,
    RunCheckpoint, RunReport, Stage, StageFailure, StageRecord, StopPoint,
};
pub use pipeline::{
    build_task_corpus, collect, CollectReport, MetricKind, TaskCorpus, TaskEntry, TaskRegistry, MIN_TASK_RECORDS,
};
#[cfg(feature = "http")]
pub use sources::HttpArticleSource;
pub use sources::{
    DataSource, LocalDirectorySource, RawDocument, SyntheticCodeSource, SyntheticDialogSource, SyntheticProseSource,
};
pub use store::{AppendOutcome, Clock, Record, RecordStore, SteppedClock, SystemClock, DEFAULT_CAP};
