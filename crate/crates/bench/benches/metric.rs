use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use match_bench::{embedding, series, REFERENCE, SNIPPET};
use match_core::datamodel::{make_splits, DEFAULT_RATIOS};
use match_core::enhancement::{EnhancementConfig, EnhancementParameters, Variant};
use match_core::evaluation::{baseline_scores, kendall_tau_b, spearman};
use match_core::rng::substream;
use match_core::scoring::{cosine, cosine_with_grad};
use match_core::synthetic::{generate, toy_training_config, SyntheticConfig};
use match_core::training::Trainer;

fn bench_cosine(c: &mut Criterion) {
    let a = embedding(1, 768, 1).pooled;
    let b = embedding(1, 768, 2).pooled;
    c.bench_function("cosine/768", |bench| {
        bench.iter(|| cosine(black_box(a.view()), black_box(b.view())))
    });
}

fn bench_enhancement(c: &mut Criterion) {
    let mut group = c.benchmark_group("enhancement");
    for (variant, dim) in [
        (Variant::Linear, 64),
        (Variant::Linear, 768),
        (Variant::CrossAttention, 64),
        (Variant::CrossAttention, 256),
    ] {
        let cfg = EnhancementConfig {
            variant,
            shared_dim: dim,
            ..EnhancementConfig::default()
        };
        let params = EnhancementParameters::init(&cfg, dim, &mut substream(0, "bench.init", 0)).unwrap();
        let task = embedding(12, dim, 3);
        let code = embedding(40, dim, 4);
        let id = format!("{}/{dim}", variant.label());
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| params.forward(black_box(&task), black_box(&code), None).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            let mut rng = substream(0, "bench.dropout", 0);
            bench.iter(|| {
                let (pair, trace) = params.forward(&task, &code, Some(&mut rng)).unwrap();
                let (_, dt, dc) = cosine_with_grad(pair.task.view(), pair.code.view()).unwrap();
                params.backward(&trace, dt.view(), dc.view()).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation");
    for n in [1_000, 100_000] {
        let (x, y) = series(n, 5);
        group.bench_with_input(BenchmarkId::new("kendall_tau_b", n), &n, |bench, _| {
            bench.iter(|| kendall_tau_b(black_box(&x), black_box(&y)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("spearman", n), &n, |bench, _| {
            bench.iter(|| spearman(black_box(&x), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn bench_baselines(c: &mut Criterion) {
    c.bench_function("baselines/snippet", |bench| {
        bench.iter(|| baseline_scores(black_box(SNIPPET), black_box(REFERENCE)).unwrap())
    });
}

fn bench_training(c: &mut Criterion) {
    let ds = generate(&SyntheticConfig::default(), 0).unwrap();
    let plan = make_splits(&ds, 0, DEFAULT_RATIOS, 1).unwrap().remove(0);
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for variant in [Variant::Linear, Variant::CrossAttention] {
        let mut cfg = toy_training_config(variant);
        cfg.max_epochs = 1;
        let trainer = Trainer::new(&ds, cfg).unwrap();
        group.bench_function(variant.label(), |bench| {
            bench.iter(|| trainer.train_one(0, &plan).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_cosine,
    bench_enhancement,
    bench_correlation,
    bench_baselines,
    bench_training
);
criterion_main!(benches);
