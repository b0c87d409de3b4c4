use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posekit_bench::{random_classes, random_posteriors};
use posekit_core::inference::{condition, marginal_heatmap, mixture, Evidence, GridSpec};
use posekit_core::shape::Point;
use posekit_core::temporal::{build_transitions, viterbi, FrameSequence};

const N_POINTS: usize = 21;

fn decode(c: &mut Criterion) {
    let mut g = c.benchmark_group("viterbi_60_frames");
    g.sample_size(20);
    for k in [100, 1_000] {
        let classes = random_classes(k, N_POINTS, 3);
        let trans = build_transitions(&classes, 0.9, 4.0, 1.0).unwrap();
        let seq = FrameSequence::from_posteriors(random_posteriors(k, 60, 4)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(k), &seq, |b, seq| b.iter(|| viterbi(black_box(seq), &trans).unwrap()));
    }
    g.finish();
}

fn posterior_queries(c: &mut Criterion) {
    let k = 1_000;
    let classes = random_classes(k, N_POINTS, 5);
    let p = random_posteriors(k, 1, 6).remove(0);
    let ev = Evidence::new(0, Point::new(0.0, 0.0), 0.3).unwrap();
    c.bench_function("condition_k1000", |b| b.iter(|| condition(black_box(&p), &classes, &ev).unwrap()));
    let dist = mixture(&p, &classes).unwrap();
    c.bench_function("heatmap_k1000_64px", |b| {
        b.iter(|| marginal_heatmap(black_box(&dist), 0, GridSpec::square(0.75, 64)).unwrap())
    });
}

criterion_group!(benches, decode, posterior_queries);
criterion_main!(benches);
