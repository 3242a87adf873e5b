use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pnn_bench::{base, network, sequences};
use pnn_core::adaptation::{train_task, ReplayBuffer, TrainConfig};

fn train(c: &mut Criterion) {
    let base = base();
    let len = base.model().config().max_seq_len;
    let train_set = sequences(8, len, 2);
    let heldout = sequences(2, len, 3);
    // One epoch of one micro-batch: a single optimizer step plus evaluation.
    let config = TrainConfig {
        micro_batch: 8,
        accumulation_steps: 1,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_task");
    group.sample_size(20);
    for columns in [1u32, 2] {
        let net = network(&base, columns);
        group.bench_function(format!("one_step/{columns}"), |b| {
            b.iter_batched(
                || (net.clone(), ReplayBuffer::new(0)),
                |(mut net, mut buffer)| {
                    train_task(&mut net, columns - 1, &train_set, &heldout, &config, None, &mut buffer).unwrap()
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, train);
criterion_main!(benches);
