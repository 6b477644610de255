use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use fastflow_bench::{flows, model, system};
use fastflow_core::model::ClassifierSession;
use fastflow_core::representation::featurize;
use fastflow_core::rl::{double_q_loss, LossKind, Transition};
use fastflow_core::selection::{run_flow, FusionMode};
use fastflow_core::{DeciderConfig, FeatureConfig, Granularity};

fn featurization(c: &mut Criterion) {
    let flows = flows(20);
    let cfg = FeatureConfig::default();
    let mut group = c.benchmark_group("featurize");
    for g in [Granularity::Packet, Granularity::Slot] {
        group.bench_function(g.as_str(), |b| {
            b.iter(|| {
                for f in &flows {
                    black_box(featurize(f, g, &cfg, usize::MAX).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn recurrent_step(c: &mut Criterion) {
    let m = model(Granularity::Packet, 3);
    let x = [1.0, 0.4, 2.3];
    c.bench_function("recurrent_step_h128", |b| {
        b.iter_batched_ref(
            || ClassifierSession::new(&m, DeciderConfig { t_unk: 0.99, c_unk: usize::MAX }),
            |s| black_box(s.push(&x).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn loss_and_gradients(c: &mut Criterion) {
    let online = model(Granularity::Packet, 4);
    let target = model(Granularity::Packet, 5);
    let flows = flows(22);
    let seqs: Vec<Vec<Vec<f64>>> = flows
        .iter()
        .take(64)
        .map(|f| featurize(f, Granularity::Packet, &FeatureConfig::default(), 20).unwrap().rows)
        .collect();
    let rows: Vec<&[Vec<f64>]> = seqs.iter().map(Vec::as_slice).collect();
    let batch: Vec<Transition> = (0..64)
        .map(|i| Transition {
            flow: i,
            step: 1 + i % 12,
            granularity: Granularity::Packet,
            action: i % 4,
            reward: if i % 4 == 3 { -0.03 } else { 1.0 },
            terminal: i % 4 != 3,
        })
        .collect();
    let weights = vec![1.0; 64];
    c.bench_function("double_q_loss_batch64", |b| {
        b.iter(|| black_box(double_q_loss(&online, &target, &rows, &batch, &weights, 1.0, 20, LossKind::Huber)))
    });
}

fn selection(c: &mut Criterion) {
    let system = system();
    let flows = flows(10);
    c.bench_function("run_flow_fused", |b| {
        b.iter(|| {
            for f in &flows {
                black_box(run_flow(f, &system, FusionMode::Fused).unwrap());
            }
        })
    });
}

criterion_group!(benches, featurization, recurrent_step, loss_and_gradients, selection);
criterion_main!(benches);
