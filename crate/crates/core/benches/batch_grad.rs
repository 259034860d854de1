//! Micro-batch gradient: one worker vs. the full pool.
//!
//! Build with `--no-default-features` to measure the plain sequential loop
//! instead of a one-thread rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sxl_core::features::{gen_synthetic, SyntheticConfig};
use sxl_core::model::{Encoder, ModelConfig};
use sxl_core::parallel::with_threads;
use sxl_core::permutation::PermMode;
use sxl_core::trainer::{masks_for, pretrain_batch, PretrainItem};
use sxl_core::Tensor;

fn bench(c: &mut Criterion) {
    let corpus = gen_synthetic(&SyntheticConfig {
        num_utts: 16,
        seed: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let enc = Encoder::<f32>::init(ModelConfig::toy(), 0).unwrap();
    let frames: Vec<Tensor<f32>> = corpus.sequences.iter().map(|s| s.frames.clone()).collect();
    let items: Vec<PretrainItem<f32>> = corpus
        .sequences
        .iter()
        .zip(&frames)
        .enumerate()
        .map(|(i, (s, f))| PretrainItem {
            id: &s.id,
            frames: f,
            masks: masks_for(f.rows(), PermMode::Random, 0.2, 0, 0, i).unwrap(),
            dropout: None,
        })
        .collect();

    let max = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut group = c.benchmark_group("pretrain_batch_16utt");
    group.sample_size(10);
    let mut counts = vec![1];
    if max > 1 {
        counts.push(max);
    }
    for threads in counts {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &n| {
            b.iter(|| with_threads(n, || pretrain_batch(&enc, &items, None, 1).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
