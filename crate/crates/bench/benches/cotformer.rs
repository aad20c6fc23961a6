use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cotformer_bench::{fixture, tokens};
use cotformer_core::cost::macs_model;
use cotformer_core::model::{build_mask, forward_values, incremental_decode, Gate};
use cotformer_core::routing::select_top_k;
use cotformer_core::train::{batch_gradients, Batch};
use cotformer_core::{CapacitySchedule, ModelConfig, Participation, Routing, Variant};

const VARIANTS: [Variant; 3] = [Variant::Standard, Variant::BlockUniversal, Variant::Cotformer];

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    for v in VARIANTS {
        let (cfg, p) = fixture(v, 3, 64);
        let ids = tokens(64);
        g.bench_function(v.name(), |b| b.iter(|| forward_values(&cfg, &p, black_box(&ids), &Routing::Full).unwrap()));
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_gradients");
    for v in VARIANTS {
        let (cfg, p) = fixture(v, 3, 64);
        let ids = tokens(65);
        let batch = Batch {
            inputs: vec![ids[..64].to_vec(); 4],
            targets: vec![ids[1..].to_vec(); 4],
        };
        g.bench_function(v.name(), |b| b.iter(|| batch_gradients(&cfg, &p, &batch, &Routing::Full).unwrap()));
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let (cfg, p) = fixture(Variant::Cotformer, 3, 64);
    let prompt = tokens(8);
    c.bench_function("incremental_decode/cotformer_32_new", |b| {
        b.iter(|| incremental_decode(&cfg, &p, black_box(&prompt), 32, Gate::All).unwrap())
    });
}

fn masks(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_mask");
    for s in [64, 256] {
        let part = Participation::full(4, s);
        g.bench_with_input(BenchmarkId::new("cotformer_pass4", s), &s, |b, &s| {
            b.iter(|| build_mask(Variant::Cotformer, s, 4, 4, black_box(&part), true).unwrap())
        });
    }
    g.finish();
}

fn routing(c: &mut Criterion) {
    let scores: Vec<f64> = tokens(1024).iter().map(|&t| t as f64 / 256.0).collect();
    let eligible: Vec<usize> = (0..1024).collect();
    c.bench_function("select_top_k/1024", |b| b.iter(|| select_top_k(&eligible, black_box(&scores), 0.5, 1024)));
}

fn cost(c: &mut Criterion) {
    let cfg = ModelConfig::new(Variant::Cotformer, (0, 12, 0), 5, 768, 12, 50304, 8192);
    let sched = CapacitySchedule::new(vec![1.0, 0.8, 0.6, 0.4, 0.2]).unwrap();
    c.bench_function("macs_model/cotformer_12x5", |b| {
        b.iter(|| macs_model(&cfg, black_box(8192), Some(&sched)).unwrap())
    });
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, backward, decode, masks, routing, cost
);
criterion_main!(benches);
