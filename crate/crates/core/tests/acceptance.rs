//! One `[PASS]`/`[FAIL]` line per acceptance criterion. Exits non-zero if
//! any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use pnn_core::adaptation::{attach_lora, TrainConfig};
use pnn_core::agent::{collect, AgentState, RecordStore, SteppedClock, SyntheticDialogSource, TaskRegistry};
use pnn_core::base_lm::{perplexity, BaseConfig, NextTokenModel, PretrainConfig, VOCAB_SIZE};
use pnn_core::harness::{
    bleu4, code_accuracy, median, meta_trial, pretrain_general_base, run_experiment, words, ExperimentConfig,
    ExperimentReport, GeneralBaseConfig, MetaTrialConfig, SourceKind, TaskSpec, Toggles,
};
use pnn_core::pnn::{FrozenBase, ProgressiveNetwork};
use pnn_core::tensor::DenseArray;
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ac1_gradients() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_op = "";
    let mut instances = 0;
    for op in common::GRAD_OPS {
        for i in 0..24 {
            let err = common::gradcheck_op(op, 7000 + i);
            instances += 1;
            if !(err <= worst) {
                worst = err;
                worst_op = op;
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{} ops x 24 instances ({instances}), worst rel err {worst:.2e} ({worst_op}), {:.2}s",
            common::GRAD_OPS.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ac2_equations() -> Outcome {
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for seed in 0..100 {
        for (name, err) in common::equation_errors(10_000 + seed) {
            let w = worst.entry(name).or_default();
            *w = w.max(err);
        }
    }
    let pass = worst.len() == 6 && worst.values().all(|e| *e <= 1e-6);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("100 instances; max abs err: {detail}"))
}

fn task_train_config() -> TrainConfig {
    TrainConfig {
        micro_batch: 8,
        accumulation_steps: 1,
        epochs: 20,
        base_lr: 3e-3,
        meta_inner_lr: 0.1,
        ..TrainConfig::default()
    }
}

fn experiment_template() -> ExperimentConfig {
    ExperimentConfig {
        seeds: SEEDS.to_vec(),
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
        train: task_train_config(),
        ..ExperimentConfig::default()
    }
}

fn ac3_zero_forgetting(base: &Arc<FrozenBase>) -> Outcome {
    let cfg = experiment_template();
    let mut orch = cfg.orchestrate_config(0);
    orch.train.epochs = 4;
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::create(dir.path().join("s.jsonl"), 1000, Box::new(SteppedClock::default())).unwrap();
    let net = ProgressiveNetwork::new(Arc::clone(base), cfg.alpha, 0).unwrap();
    let mut state = AgentState::new(net, TaskRegistry::new(), orch).unwrap();
    let mut sources: Vec<_> = cfg.tasks.iter().map(TaskSpec::source).collect();
    state.set_collect_limit(200);
    state.step(&mut store, sources[0].as_mut()).unwrap();
    let probe = state.corpora["dialog"].heldout.clone();
    let before: Vec<DenseArray> = probe.iter().map(|p| state.net.forward_task(p, 0).unwrap()).collect();
    state.step(&mut store, sources[1].as_mut()).unwrap();
    if let Some(f) = &state.report.failure {
        return outcome(false, format!("run failed: {f:?}"));
    }
    let identical = probe
        .iter()
        .zip(&before)
        .all(|(p, b)| state.net.forward_task(p, 0).unwrap().values() == b.values());
    let delta = state
        .report
        .deltas()
        .into_iter()
        .find(|(r, t, _)| *r == 1 && t == "dialog")
        .map(|d| d.2);
    outcome(
        identical && delta == Some(0.0),
        format!(
            "{} probe sequences bit-identical: {identical}; task-1 delta {delta:?}",
            probe.len()
        ),
    )
}

fn final_dialog_delta(r: &ExperimentReport, seed: u64) -> f64 {
    r.runs
        .iter()
        .find(|s| s.seed == seed)
        .and_then(|s| s.forgetting.final_delta("dialog"))
        .unwrap_or(f64::NAN)
}

fn displacement(r: &ExperimentReport, seed: u64) -> f64 {
    r.runs
        .iter()
        .find(|s| s.seed == seed)
        .and_then(|s| s.report.rounds.get(1))
        .and_then(|round| round.refinement_displacement.first().copied())
        .unwrap_or(f64::NAN)
}

struct Grid {
    refine: ExperimentReport,
    refine_no_ewc: ExperimentReport,
    baseline: ExperimentReport,
    elapsed: Duration,
}

fn run_grid(base: &Arc<FrozenBase>) -> pnn_core::Result<Grid> {
    let started = Instant::now();
    let template = experiment_template();
    let refine = ExperimentConfig {
        lora_refine: true,
        ..template.clone()
    };
    let refine_no_ewc = ExperimentConfig {
        toggles: Toggles {
            ewc: false,
            ..Toggles::default()
        },
        ..refine.clone()
    };
    Ok(Grid {
        refine: run_experiment(&refine, base)?,
        refine_no_ewc: run_experiment(&refine_no_ewc, base)?,
        baseline: run_experiment(&template.baseline(), base)?,
        elapsed: started.elapsed(),
    })
}

fn ac4_forgetting_order(grid: &Grid) -> Outcome {
    let mut pnn: Vec<f64> = SEEDS.iter().map(|&s| final_dialog_delta(&grid.refine, s)).collect();
    let mut base: Vec<f64> = SEEDS.iter().map(|&s| final_dialog_delta(&grid.baseline, s)).collect();
    let (mp, mb) = (median(&mut pnn).unwrap(), median(&mut base).unwrap());
    let within = grid.elapsed < Duration::from_secs(600);
    outcome(
        mb >= 2.0 * mp && mp >= 0.0 && within,
        format!(
            "median task-1 delta: baseline {mb:.4}, pnn+lora refinement {mp:.4}; grid {:.0}s",
            grid.elapsed.as_secs_f64()
        ),
    )
}

fn ac5_ewc(grid: &Grid) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for &s in &SEEDS {
        let (de, dn) = (final_dialog_delta(&grid.refine, s), final_dialog_delta(&grid.refine_no_ewc, s));
        let (xe, xn) = (displacement(&grid.refine, s), displacement(&grid.refine_no_ewc, s));
        if de <= dn && xe <= xn {
            wins += 1;
        }
        rows.push(format!("s{s}: delta {de:.3}/{dn:.3} disp {xe:.3}/{xn:.3}"));
    }
    outcome(
        wins >= 4,
        format!("{wins}/5 seeds with EWC <= no EWC (ewc/no-ewc) [{}]", rows.join("; ")),
    )
}

fn ac6_lora(base: &Arc<FrozenBase>) -> Outcome {
    let mut net = ProgressiveNetwork::new(Arc::clone(base), 0.7, 0).unwrap();
    net.add_column(0).unwrap();
    net.freeze_column(0).unwrap();
    let tokens: Vec<u32> = base.model().tokenizer().tokenize(b"Q: what color is the sky? A: ");
    let before = net.forward_task(&tokens, 0).unwrap();
    let rank = TrainConfig::default().lora_rank;
    let mut ratios = Vec::new();
    for target in ["col0/w1", "col0/w2"] {
        ratios.push((target, attach_lora(&mut net, target, rank).unwrap().trainable_ratio()));
    }
    let change = net.forward_task(&tokens, 0).unwrap().max_abs_diff(&before);
    let square = ratios[0].1;
    let pass = ratios.iter().all(|(_, r)| *r <= 0.2) && square == 0.125 && change == 0.0;
    outcome(
        pass,
        format!(
            "rank {rank}, d {}: ratios {}; output change on attach {change}",
            net.d_model(),
            ratios
                .iter()
                .map(|(t, r)| format!("{t} {r:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn ac7_meta(base: &Arc<FrozenBase>) -> Outcome {
    let cfg = MetaTrialConfig::default();
    let never = cfg.max_steps + 1;
    let mut plain = Vec::new();
    let mut meta = Vec::new();
    for &s in &SEEDS {
        let t = meta_trial(base, &cfg, s).unwrap();
        plain.push(t.steps_plain.unwrap_or(never) as f64);
        meta.push(t.steps_meta.unwrap_or(never) as f64);
    }
    let detail = format!("steps plain {plain:?}, meta {meta:?}");
    let (mp, mm) = (median(&mut plain).unwrap(), median(&mut meta).unwrap());
    outcome(
        mm <= mp,
        format!("median steps to loss {}: meta {mm}, plain {mp} ({detail})", cfg.threshold),
    )
}

fn ac8_cap() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fill = |name: &str| {
        let mut store = RecordStore::create(dir.path().join(name), 100, Box::new(SteppedClock::default())).unwrap();
        let mut src = SyntheticDialogSource::new("dialog", 5, 1000);
        let first = collect(&mut store, &mut src, 100).collected;
        let refused = store.append("extra://101", "dialog", b"one record too many").is_err();
        let lines = std::fs::read_to_string(store.path()).unwrap().lines().count();
        (first, refused, lines, std::fs::read(store.path()).unwrap())
    };
    let (n, refused, lines, a) = fill("a.jsonl");
    let (_, _, _, b) = fill("b.jsonl");
    outcome(
        n == 100 && refused && lines == 100 && a == b,
        format!("collected {n}, 101st refused: {refused}, lines {lines}, identical stores: {}", a == b),
    )
}

fn ac9_determinism(base: &Arc<FrozenBase>) -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for run in ["first", "second"] {
        let cfg = ExperimentConfig {
            seeds: vec![3],
            lora_refine: true,
            output_dir: Some(out.path().join(run)),
            ..experiment_template()
        };
        let r = run_experiment(&cfg, base).unwrap();
        let path = out.path().join(run).join(&r.variant).join("seed-3").join("report.json");
        texts.push(std::fs::read(path).unwrap());
    }
    outcome(
        texts[0] == texts[1],
        format!("report.json {} bytes, identical: {}", texts[0].len(), texts[0] == texts[1]),
    )
}

fn median_duration(samples: &mut [Duration]) -> f64 {
    samples.sort();
    samples[samples.len() / 2].as_secs_f64()
}

fn ac10_overhead(base: &Arc<FrozenBase>) -> Outcome {
    let mut one = ProgressiveNetwork::new(Arc::clone(base), 0.7, 0).unwrap();
    one.add_column(0).unwrap();
    let mut two = one.clone();
    two.add_column(1).unwrap();
    let mut r = common::rng(10);
    let len = base.model().config().max_seq_len;
    let batch: Vec<Vec<u32>> = (0..4)
        .map(|_| (0..len).map(|_| r.random_range(0..256)).collect())
        .collect();
    let time = |f: &dyn Fn(&[u32])| {
        let t = Instant::now();
        for s in &batch {
            f(s);
        }
        t.elapsed()
    };
    let base_only = |s: &[u32]| {
        base.model().forward(s).unwrap();
    };
    let col1 = |s: &[u32]| {
        one.forward_task(s, 0).unwrap();
    };
    let col2 = |s: &[u32]| {
        two.forward_task(s, 1).unwrap();
    };
    for _ in 0..5 {
        time(&base_only);
        time(&col1);
        time(&col2);
    }
    let (mut t0, mut t1, mut t2) = (Vec::new(), Vec::new(), Vec::new());
    // Interleaved so drift affects all three alike.
    for _ in 0..100 {
        t0.push(time(&base_only));
        t1.push(time(&col1));
        t2.push(time(&col2));
    }
    let (t0, t1, t2) = (median_duration(&mut t0), median_duration(&mut t1), median_duration(&mut t2));
    let extrapolated = 2.0 * t1 - t0;
    outcome(
        t2 <= 1.05 * extrapolated,
        format!(
            "median batch ms: base {:.3}, 1 column {:.3}, 2 columns {:.3}; ratio to extrapolated {:.4}",
            t0 * 1e3,
            t1 * 1e3,
            t2 * 1e3,
            t2 / extrapolated
        ),
    )
}

struct UniformLogits;

impl NextTokenModel for UniformLogits {
    fn logits(&self, tokens: &[u32]) -> pnn_core::Result<DenseArray> {
        Ok(DenseArray::filled(&[tokens.len(), VOCAB_SIZE], 0.0))
    }

    fn max_seq_len(&self) -> usize {
        128
    }
}

struct RandomLogits(std::cell::RefCell<rand_chacha::ChaCha8Rng>);

impl NextTokenModel for RandomLogits {
    fn logits(&self, tokens: &[u32]) -> pnn_core::Result<DenseArray> {
        let mut r = self.0.borrow_mut();
        let v = (0..tokens.len() * VOCAB_SIZE).map(|_| r.random::<f32>()).collect();
        DenseArray::new(vec![tokens.len(), VOCAB_SIZE], v)
    }

    fn max_seq_len(&self) -> usize {
        128
    }
}

fn ac11_metrics() -> Outcome {
    let x = words("Q: what color is the sky? A: the sky is blue.");
    let bleu = bleu4(&x, &[x.clone()]).unwrap();
    let mut r = common::rng(11);
    let corpus: Vec<Vec<u32>> = (0..100)
        .map(|_| (0..128).map(|_| r.random_range(0..VOCAB_SIZE as u32)).collect())
        .collect();
    let ppl = perplexity(&UniformLogits, &corpus).unwrap();
    let acc = code_accuracy(&RandomLogits(std::cell::RefCell::new(common::rng(12))), &corpus).unwrap();
    let n = (127 * corpus.len()) as f64;
    let p = 1.0 / VOCAB_SIZE as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let z = (acc - p) / sigma;
    outcome(
        bleu == 1.0 && (ppl - VOCAB_SIZE as f64).abs() < 1e-6 && z.abs() <= 3.0,
        format!("BLEU(x,x) {bleu}, uniform ppl {ppl:.9}, random accuracy {acc:.5} over {n} positions (z {z:.2})"),
    )
}

fn report(id: &str, name: &str, o: &Outcome, failures: &mut usize) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        *failures += 1;
    }
    println!("[{tag}] {id} {name}: {}", o.detail);
}

fn main() {
    let mut failures = 0;
    report("AC1", "gradient oracle", &ac1_gradients(), &mut failures);
    report("AC2", "equation oracles", &ac2_equations(), &mut failures);
    report("AC8", "pipeline cap", &ac8_cap(), &mut failures);
    report("AC11", "metric sanity", &ac11_metrics(), &mut failures);

    let started = Instant::now();
    let (model, pre) = pretrain_general_base(&GeneralBaseConfig {
        model: BaseConfig::default(),
        pretrain: PretrainConfig {
            steps: 600,
            batch_size: 8,
            ..PretrainConfig::default()
        },
        ..GeneralBaseConfig::default()
    })
    .expect("pretraining");
    println!(
        "base: held-out perplexity {:.3} -> {:.3} in {:.0}s",
        pre.initial_heldout_perplexity,
        pre.heldout_perplexity,
        started.elapsed().as_secs_f64()
    );
    let base = FrozenBase::new(model);

    report("AC3", "zero forgetting under freeze", &ac3_zero_forgetting(&base), &mut failures);
    match run_grid(&base) {
        Ok(grid) => {
            report("AC4", "forgetting ordering", &ac4_forgetting_order(&grid), &mut failures);
            report("AC5", "EWC effect", &ac5_ewc(&grid), &mut failures);
        }
        Err(e) => {
            let o = outcome(false, format!("experiment failed: {e}"));
            report("AC4", "forgetting ordering", &o, &mut failures);
            report("AC5", "EWC effect", &o, &mut failures);
        }
    }
    report("AC6", "LoRA efficiency", &ac6_lora(&base), &mut failures);
    report("AC7", "meta benefit", &ac7_meta(&base), &mut failures);
    report("AC9", "determinism", &ac9_determinism(&base), &mut failures);
    report("AC10", "column overhead", &ac10_overhead(&base), &mut failures);

    println!("{} criteria, {failures} failed", 11);
    if failures > 0 {
        std::process::exit(1);
    }
}
