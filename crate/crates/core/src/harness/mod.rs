//! Metrics, the experiment runner, ablations and report tables.

mod corpus;
mod experiment;
mod meta_trial;
pub mod metrics;
mod table;

pub use corpus::{general_corpus, pretrain_general_base, GeneralBaseConfig, PRETRAIN_DIALOG_VARIANT};
pub use experiment::{
    ablation_variants, median, run_ablation, run_experiment, ExperimentConfig, ExperimentReport, ForgettingCell,
    ForgettingReport, SeedRun, SourceKind, TaskSpec, Toggles,
};
pub use meta_trial::{meta_trial, MetaTrial, MetaTrialConfig};
pub use metrics::{bleu4, code_accuracy, words};
pub use table::{emit_table, CSV_HEADER};
