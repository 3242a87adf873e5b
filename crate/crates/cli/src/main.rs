//! `pnn-agent`: pretrain a base model, collect task data, and run the
//! forgetting experiments.
//!
//! Exit status is 0 on success, 2 when the configuration is rejected and 1
//! for any other failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pnn_core::agent::{collect, RecordStore, SteppedClock};
use pnn_core::base_lm::BaseModel;
use pnn_core::harness::{
    emit_table, pretrain_general_base, run_ablation, run_experiment, ExperimentConfig, ExperimentReport,
    ForgettingReport, GeneralBaseConfig,
};
use pnn_core::agent::RunReport;
use pnn_core::pnn::FrozenBase;
use pnn_core::tensor::checkpoint::write_atomic;
use pnn_core::tensor::Checkpoint;
use pnn_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pnn-agent", version, about)]
struct Cli {
    /// JSON configuration for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed(s) in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base model on the general corpus and save it.
    PretrainBase,
    /// Collect every task's records into a capped store.
    Collect,
    /// Run one experiment variant over its seeds.
    Run {
        /// Base checkpoint; defaults to `<out>/base.json`.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Run the ablation grid.
    Ablate {
        /// Base checkpoint; defaults to `<out>/base.json`.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Rebuild the tables from the run reports under `--out`.
    Report,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidAlpha(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn runtime(context: &str) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

/// Reads the JSON config, or the type's default when none was given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_base(path: &Path) -> CliResult<Arc<FrozenBase>> {
    let ck = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(FrozenBase::new(BaseModel::from_checkpoint(&ck)?))
}

fn experiment_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut config: ExperimentConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.output_dir = Some(cli.out.clone());
    config.validate()?;
    Ok(config)
}

fn write_tables(out: &Path, reports: &[ForgettingReport]) -> CliResult<()> {
    let (md, csv) = emit_table(reports);
    write_atomic(&out.join("table.md"), md.as_bytes())?;
    write_atomic(&out.join("table.csv"), csv.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn summarize(out: &Path, experiments: &[ExperimentReport]) -> CliResult<()> {
    let summary: Vec<_> = experiments
        .iter()
        .map(|e| serde_json::json!({ "variant": e.variant, "median_final_delta": e.median_final_delta }))
        .collect();
    write_json(&out.join("summary.json"), &summary)?;
    let reports: Vec<ForgettingReport> = experiments
        .iter()
        .flat_map(|e| e.runs.iter().map(|r| r.forgetting.clone()))
        .collect();
    write_tables(out, &reports)
}

fn pretrain_base(cli: &Cli) -> CliResult<()> {
    let mut config: GeneralBaseConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.model.init_seed = seed;
        config.pretrain.seed = seed;
    }
    config.model.validate()?;
    let (model, report) = pretrain_general_base(&config)?;
    model.to_checkpoint().save(&cli.out.join("base.json"))?;
    write_json(&cli.out.join("pretrain.json"), &report)?;
    println!(
        "held-out perplexity {:.3} -> {:.3} after {} steps; saved {}",
        report.initial_heldout_perplexity,
        report.heldout_perplexity,
        report.steps,
        cli.out.join("base.json").display()
    );
    Ok(())
}

/// `--seed` shifts every task's data seed.
fn collect_tasks(cli: &Cli) -> CliResult<()> {
    let mut config: ExperimentConfig = load_config(cli.config.as_deref())?;
    config.validate()?;
    let path = cli.out.join("store.jsonl");
    if path.exists() {
        return Err(Failure::Runtime(format!("{} already exists", path.display())));
    }
    fs::create_dir_all(&cli.out).map_err(runtime("creating output directory"))?;
    let mut store = RecordStore::create(&path, config.store_cap, Box::new(SteppedClock::default()))?;
    for task in &mut config.tasks {
        task.data_seed = task.data_seed.wrapping_add(cli.seed.unwrap_or(0));
        let report = collect(&mut store, task.source().as_mut(), task.records);
        println!(
            "{}: {} collected, {} duplicates, {} errors{}",
            task.tag,
            report.collected,
            report.duplicates,
            report.errors.len(),
            if report.at_cap { ", store full" } else { "" }
        );
    }
    println!("{} records in {}", store.count(), path.display());
    Ok(())
}

fn run(cli: &Cli, base: Option<&Path>) -> CliResult<()> {
    let config = experiment_config(cli)?;
    let base = load_base(&base.map_or_else(|| cli.out.join("base.json"), Path::to_path_buf))?;
    let report = run_experiment(&config, &base)?;
    summarize(&cli.out, &[report])
}

fn ablate(cli: &Cli, base: Option<&Path>) -> CliResult<()> {
    let config = experiment_config(cli)?;
    let base = load_base(&base.map_or_else(|| cli.out.join("base.json"), Path::to_path_buf))?;
    let reports = run_ablation(&config, &base)?;
    summarize(&cli.out, &reports)
}

fn sorted_dirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(runtime("reading reports"))? {
        let path = entry.map_err(runtime("reading reports"))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Expects the `<out>/<variant>/seed-<n>/report.json` layout `run` writes.
fn report(cli: &Cli) -> CliResult<()> {
    let mut reports = Vec::new();
    for variant_dir in sorted_dirs(&cli.out)? {
        let variant = variant_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for seed_dir in sorted_dirs(&variant_dir)? {
            let path = seed_dir.join("report.json");
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(runtime("reading report"))?;
            let run: RunReport =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if cli.seed.is_none_or(|s| s == run.seed) {
                reports.push(ForgettingReport::from_run(&variant, &run));
            }
        }
    }
    if reports.is_empty() {
        return Err(Failure::Runtime(format!("no run reports under {}", cli.out.display())));
    }
    reports.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
    write_tables(&cli.out, &reports)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::PretrainBase => pretrain_base(&cli),
        Command::Collect => collect_tasks(&cli),
        Command::Run { base } => run(&cli, base.as_deref()),
        Command::Ablate { base } => ablate(&cli, base.as_deref()),
        Command::Report => report(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config rejected: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
