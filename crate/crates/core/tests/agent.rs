mod common;

use common::{code, dialog, quick_orchestrate_config, small_frozen_base, store_in};
use pnn_core::agent::{
    build_task_corpus, clean_text, collect, orchestrate, AgentState, ColumnMode, DataSource, RawDocument, RunCheckpoint, Stage,
    StopPoint, SyntheticDialogSource, TaskRegistry,
};
use pnn_core::pnn::ProgressiveNetwork;
use pnn_core::Result;
use proptest::prelude::*;

fn fresh_net(seed: u64) -> ProgressiveNetwork {
    ProgressiveNetwork::new(small_frozen_base(seed), 0.7, seed).unwrap()
}

#[test]
fn cap_of_three_keeps_three_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 3);
    let mut src = SyntheticDialogSource::new("dialog", 1, 10);
    let r = collect(&mut store, &mut src, 10);
    assert_eq!((r.collected, store.count()), (3, 3));
    assert!(r.at_cap);
    let text = std::fs::read_to_string(store.path()).unwrap();
    assert_eq!(text.lines().count(), 3);
    let again = collect(&mut store, &mut src, 10);
    assert_eq!(again.collected, 0);
    assert!(again.at_cap);
}

#[test]
fn seeded_collection_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let mut store = store_in(dir.path(), name, 100);
        collect(&mut store, &mut SyntheticDialogSource::new("dialog", 9, 50), 40);
        bytes.push(std::fs::read(store.path()).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert!(!bytes[0].is_empty());
}

#[test]
fn reopened_store_keeps_ids_and_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 5);
    collect(&mut store, &mut SyntheticDialogSource::new("d", 2, 50), 3);
    let mut again = pnn_core::agent::RecordStore::open(
        store.path().to_owned(),
        5,
        Box::new(pnn_core::agent::SteppedClock::default()),
    )
    .unwrap();
    assert_eq!(again.last_id(), Some(2));
    let r = collect(&mut again, &mut SyntheticDialogSource::new("d", 3, 50), 10);
    assert_eq!(r.collected, 2);
    let ids: Vec<u64> = again.records().iter().map(|r| r.id).collect();
    assert_eq!(ids, [0, 1, 2, 3, 4]);
}

#[test]
fn corpus_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 100);
    collect(&mut store, &mut SyntheticDialogSource::new("dialog", 4, 100), 20);
    let a = build_task_corpus(&store, "dialog", 64, None).unwrap();
    let b = build_task_corpus(&store, "dialog", 64, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash, GOLDEN_CORPUS_HASH);
}

const GOLDEN_CORPUS_HASH: &str = "d689440abb2546e85473a064a6f19e4b4aa9b13c242cfb10167f10125cc20bc6";

#[test]
fn clean_text_examples() {
    assert_eq!(clean_text(b"  a \t b  "), b"a b");
    assert_eq!(clean_text(b"x"), b"x");
    assert_eq!(clean_text(b"\x01\x02"), b"");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn clean_text_is_idempotent(raw in proptest::collection::vec(any::<u8>(), 0..64)) {
        let once = clean_text(&raw);
        prop_assert_eq!(clean_text(&once), once);
    }
}

#[test]
fn single_task_adds_one_column_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 1000);
    let mut net = fresh_net(1);
    let mut registry = TaskRegistry::new();
    let report = orchestrate(&mut net, &mut store, &mut registry, &mut [dialog("dialog", 1)], &quick_orchestrate_config(1)).unwrap();
    assert!(report.failure.is_none(), "{:?}", report.failure);
    assert_eq!(report.columns_added(), 1);
    assert_eq!(report.rounds[0].evaluations.len(), 1);
    assert_eq!(net.num_columns(), 1);
    assert!(report.rounds[0].meta_rounds > 0);
    assert_eq!(report.rounds[0].fisher_parameters.len(), 4);
}

#[test]
fn second_task_leaves_first_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 1000);
    let mut state = AgentState::new(fresh_net(2), TaskRegistry::new(), quick_orchestrate_config(2)).unwrap();
    state.step(&mut store, dialog("dialog", 2).as_mut()).unwrap();
    let probe: Vec<Vec<u32>> = vec![vec![257, 81, 58, 32, 119], vec![257, 120, 32, 61, 32, 49]];
    let before: Vec<_> = probe.iter().map(|p| state.net.forward_task(p, 0).unwrap()).collect();
    state.step(&mut store, code("code", 3).as_mut()).unwrap();
    let report = &state.report;
    assert!(report.failure.is_none(), "{:?}", report.failure);
    assert!(report.rounds[1].training.is_some());
    for (p, b) in probe.iter().zip(&before) {
        let after = state.net.forward_task(p, 0).unwrap();
        assert_eq!(after.values(), b.values());
    }
    let deltas = report.deltas();
    let dialog_after: Vec<_> = deltas.iter().filter(|(r, t, _)| *r == 1 && t == "dialog").collect();
    assert_eq!(dialog_after.len(), 1);
    assert_eq!(dialog_after[0].2, 0.0);
    assert_eq!(report.rounds[1].evaluations.len(), 2);
    assert_eq!(state.net.num_columns(), 2);
}

#[test]
fn known_tag_trains_lora_without_a_new_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 1000);
    let mut net = fresh_net(3);
    let mut registry = TaskRegistry::new();
    let mut sources = [dialog("dialog", 3), code("code", 4), dialog("dialog", 5)];
    let report = orchestrate(&mut net, &mut store, &mut registry, &mut sources, &quick_orchestrate_config(3)).unwrap();
    assert!(report.failure.is_none(), "{:?}", report.failure);
    assert_eq!(net.num_columns(), 2);
    assert_eq!(report.rounds[2].column_added, None);
    let updated = &report.rounds[2].training.as_ref().unwrap().updated_parameters;
    assert!(updated.iter().all(|n| n.starts_with("lora/col0/")), "{updated:?}");
    assert_eq!(updated.len(), 4);
    assert_eq!(report.rounds[2].evaluations.len(), 2);
}

#[test]
fn columns_match_distinct_tags() {
    for mode in [ColumnMode::Progressive, ColumnMode::Shared] {
        let dir = tempfile::tempdir().unwrap();
        let mut store = store_in(dir.path(), "s.jsonl", 1000);
        let mut net = fresh_net(4);
        let mut registry = TaskRegistry::new();
        let mut cfg = quick_orchestrate_config(4);
        cfg.column_mode = mode;
        cfg.lora = mode == ColumnMode::Progressive;
        let mut sources = [dialog("a", 1), code("b-code", 2), dialog("c", 3)];
        let report = orchestrate(&mut net, &mut store, &mut registry, &mut sources, &cfg).unwrap();
        assert!(report.failure.is_none(), "{:?}", report.failure);
        assert_eq!(registry.len(), 3);
        let want = if mode == ColumnMode::Progressive { 3 } else { 1 };
        assert_eq!(net.num_columns(), want);
    }
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut store = store_in(dir.path(), "s.jsonl", 1000);
        let mut net = fresh_net(5);
        let mut registry = TaskRegistry::new();
        let mut sources = [dialog("dialog", 5), code("code", 6)];
        let report = orchestrate(&mut net, &mut store, &mut registry, &mut sources, &quick_orchestrate_config(5)).unwrap();
        (report.to_json().unwrap(), net.digest())
    };
    assert_eq!(run(), run());
}

struct Failing;

impl DataSource for Failing {
    fn name(&self) -> &str {
        "failing"
    }
    fn task_tag(&self) -> &str {
        "broken"
    }
    fn exhausted(&self) -> bool {
        false
    }
    fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
        Err(pnn_core::Error::Source {
            source_name: "failing".into(),
            message: "unreachable".into(),
        })
    }
}

#[test]
fn failing_stage_is_recorded_and_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = store_in(dir.path(), "s.jsonl", 1000);
    let mut net = fresh_net(6);
    let mut registry = TaskRegistry::new();
    let mut sources: Vec<Box<dyn DataSource>> = vec![dialog("dialog", 6), Box::new(Failing), code("code", 7)];
    let report = orchestrate(&mut net, &mut store, &mut registry, &mut sources, &quick_orchestrate_config(6)).unwrap();
    let f = report.failure.as_ref().expect("failure recorded");
    assert_eq!((f.round, f.tag.as_str(), f.stage), (1, "broken", Stage::Corpus));
    assert_eq!(report.rounds.len(), 2);
    assert!(!report.rounds[1].collect.errors.is_empty());
    assert_eq!(registry.len(), 1);
    assert_eq!(net.num_columns(), 1);
}

#[test]
fn stop_point_leaves_checkpoint_of_completed_stages() {
    let base = small_frozen_base(7);
    for (k, stage) in Stage::ALL.iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut store = store_in(dir.path(), "s.jsonl", 1000);
        let mut net = ProgressiveNetwork::new(base.clone(), 0.7, 7).unwrap();
        let mut registry = TaskRegistry::new();
        let mut cfg = quick_orchestrate_config(7);
        cfg.checkpoint_path = Some(path.clone());
        cfg.stop_after = Some(StopPoint {
            round: 1,
            stage: *stage,
        });
        let mut sources = [dialog("dialog", 7), code("code", 8), dialog("late", 9)];
        let report = orchestrate(&mut net, &mut store, &mut registry, &mut sources, &cfg).unwrap();
        assert_eq!(report.halted_after.as_ref().map(|s| s.stage), Some(*stage));
        assert_eq!(report.rounds.len(), 2, "later sources do not run");

        let ck = RunCheckpoint::load(&path).unwrap();
        assert_eq!(ck.stages.len(), Stage::ALL.len() + k + 1);
        let last = ck.last_stage().unwrap();
        assert_eq!((last.round, last.stage), (1, *stage));
        assert_eq!(ck.report.to_json().unwrap(), report.to_json().unwrap());
        let restored = ck.network().unwrap();
        assert_eq!(restored.digest(), net.digest());
        assert_eq!(ck.registry, registry);
        let fishers = ck.fishers().unwrap();
        let want = if *stage >= Stage::Fisher { 2 } else { 1 };
        assert_eq!(fishers.len(), want, "after {stage:?}");
    }
}
