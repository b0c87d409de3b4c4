use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use posekit_bench::random_scores;
use posekit_core::classifier::loss::loss_and_grad;
use posekit_core::classifier::{ClassifierHead, Extractor, ExtractorKind, LossKind, PatchSpec};

const K_GRID: [usize; 4] = [10, 100, 1_000, 10_000];

fn head_forward(c: &mut Criterion) {
    let patch = PatchSpec::default();
    let extractor = Extractor::new(ExtractorKind::default(), patch.len(), 0).unwrap();
    let input: Vec<f64> = (0..patch.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let feature = extractor.extract_one(&input).unwrap();
    let mut g = c.benchmark_group("head_forward");
    g.bench_function("extractor", |b| b.iter(|| extractor.extract_one(black_box(&input)).unwrap()));
    for k in K_GRID {
        let head = ClassifierHead::zeros(k, extractor.dim());
        g.throughput(Throughput::Elements(k as u64));
        g.bench_with_input(BenchmarkId::new("scores", k), &head, |b, h| b.iter(|| h.scores(black_box(&feature)).unwrap()));
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grad");
    for k in K_GRID {
        let (s, members) = random_scores(k, 8, 1);
        for kind in LossKind::ALL {
            g.bench_with_input(BenchmarkId::new(kind.name(), k), &s, |b, s| {
                b.iter(|| loss_and_grad(kind, black_box(s), members[0], &members).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, head_forward, losses);
criterion_main!(benches);
