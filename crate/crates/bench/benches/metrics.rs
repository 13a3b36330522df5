use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saber_core::metrics::{fpr_at_tpr, metrics, pr_auc, roc_auc};

fn instance(n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
    let scores = labels
        .iter()
        .map(|&a| rng.random::<f64>() + if a { 0.4 } else { 0.0 })
        .collect();
    (scores, labels)
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for n in [1_000, 10_000, 100_000] {
        let (scores, labels) = instance(n);
        group.bench_with_input(BenchmarkId::new("roc_auc", n), &n, |b, _| b.iter(|| roc_auc(&scores, &labels).unwrap()));
        group.bench_with_input(BenchmarkId::new("pr_auc", n), &n, |b, _| b.iter(|| pr_auc(&scores, &labels).unwrap()));
        group.bench_with_input(BenchmarkId::new("fpr_at_95", n), &n, |b, _| {
            b.iter(|| fpr_at_tpr(&scores, &labels, 0.95).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("all_four", n), &n, |b, _| b.iter(|| metrics(&scores, &labels).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
