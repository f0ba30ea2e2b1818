use cdlm_bench::bench_model;
use cdlm_core::infer::{generate, DecodeConfig, DecodeMode};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_decode(c: &mut Criterion) {
    let (backbone, khead) = bench_model::<f32>(11);
    let prompt: Vec<u32> = vec![4, 14, 40, 5, 42, 6, 43];

    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    for &max_len in &[64usize, 128] {
        for (name, cache) in [("cached", true), ("uncached", false)] {
            group.bench_with_input(
                BenchmarkId::new(format!("greedy_{name}"), max_len),
                &max_len,
                |b, &max_len| {
                    let mut cfg = DecodeConfig::new(DecodeMode::ArGreedy, max_len);
                    cfg.use_cache = cache;
                    cfg.eos_id = None;
                    b.iter(|| generate(&backbone, None, &prompt, &cfg).unwrap());
                },
            );
        }
        group.bench_with_input(
            BenchmarkId::new("elastic", max_len),
            &max_len,
            |b, &max_len| {
                let mut cfg = DecodeConfig::new(DecodeMode::Elastic, max_len);
                cfg.gamma = 0.5;
                cfg.eos_id = None;
                b.iter(|| generate(&backbone, Some(&khead), &prompt, &cfg).unwrap());
            },
        );
        group.bench_with_input(
            BenchmarkId::new("fixed_block_16", max_len),
            &max_len,
            |b, &max_len| {
                let mut cfg = DecodeConfig::new(DecodeMode::FixedBlock(16), max_len);
                cfg.gamma = 0.5;
                cfg.eos_id = None;
                b.iter(|| generate(&backbone, None, &prompt, &cfg).unwrap());
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
