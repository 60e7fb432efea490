use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use robustdiff::training::{at_loss_graph, standard_loss};
use robustdiff::{DpmTrainer, Tape, Tensor, TrainConfig, TrainMode};
use robustdiff_bench::{cosine, normal, reference_model};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = normal(256, n, 1);
        let b = normal(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn loss_and_backward(c: &mut Criterion) {
    let sched = cosine(100);
    let model = reference_model(2, 100, 0).unwrap();
    let x0 = normal(256, 2, 3);
    let eps = normal(256, 2, 4);
    let delta = normal(256, 2, 5).scale(0.01);
    let steps = vec![40; 256];
    let w = Tensor::ones(&[256, 1]);

    c.bench_function("forward/batch256", |b| {
        b.iter(|| black_box(standard_loss(&model, &x0, 40, &eps, &sched).unwrap()))
    });
    c.bench_function("backward/batch256", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let net = model.bind(&tape, true);
            let dv = tape.leaf(delta.clone());
            let loss = at_loss_graph(&net, &x0, &steps, &eps, dv, &w, &sched).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn train_step(c: &mut Criterion) {
    let sched = cosine(100);
    let cfg = TrainConfig::default();
    let x0 = normal(cfg.batch_size, 2, 6);
    let mut group = c.benchmark_group("train_step");
    for (name, mode) in [
        ("standard", TrainMode::Standard),
        ("adversarial_k3", TrainMode::Adversarial(Default::default())),
    ] {
        let mut trainer = DpmTrainer::new(reference_model(2, 100, 0).unwrap(), &cfg).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| black_box(trainer.train_step(&x0, &mode, &cfg, &sched, usize::MAX).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, loss_and_backward, train_step);
criterion_main!(benches);
