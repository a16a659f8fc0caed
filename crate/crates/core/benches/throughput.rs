//! Throughput of the data-parallel inner loops.
//!
//! With the default `parallel` feature the same workload is measured
//! under thread pools of different sizes (results are bit-identical, so
//! only the wall time moves). Build with `--no-default-features` to
//! bench the true sequential fallback; criterion's saved baselines then
//! show the cross-build comparison.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use layercake_core::checkpoint::FreezeMask;
use layercake_core::corpus::{gen_corpus, gen_general_mcq, CorpusKind, Split};
use layercake_core::eval::{eval_suite, mcq_accuracy, perplexity};
use layercake_core::model::{forward, init_model, ModelConfig};
use layercake_core::probe::{angular_profile, removal_probe, CapturePosition};
use layercake_core::tensor::mm;
use layercake_core::train::{cpt_train, Hyper};

fn desk_model() -> layercake_core::Checkpoint {
    let cfg = ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 256,
        max_seq_len: 256,
        norm_eps: 1e-5,
        seed: 12,
    };
    init_model(&cfg).unwrap()
}

#[cfg(feature = "parallel")]
fn with_threads<R>(n: usize, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R>(_n: usize, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    f()
}

fn thread_counts() -> Vec<usize> {
    if cfg!(feature = "parallel") {
        let max = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(2);
        let mut counts: Vec<usize> = vec![1, 2, 4];
        counts.retain(|&c| c <= max.max(2));
        counts
    } else {
        vec![1]
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = layercake_core::rng::Rng::new(3);
    let (n, k, m) = (128, 64, 256);
    let a: Vec<f32> = (0..n * k).map(|_| rng.gaussian() as f32).collect();
    let b: Vec<f32> = (0..k * m).map(|_| rng.gaussian() as f32).collect();
    c.bench_function("matmul_128x64x256", |bch| {
        bch.iter(|| mm(black_box(&a), black_box(&b), n, k, m))
    });
}

fn bench_forward(c: &mut Criterion) {
    let ckpt = desk_model();
    let mut rng = layercake_core::rng::Rng::new(4);
    let tokens: Vec<u32> = (0..128).map(|_| rng.next_u64() as u32 % 256).collect();
    c.bench_function("forward_l8_t128", |bch| {
        bch.iter(|| forward(black_box(&ckpt), black_box(&tokens), false).unwrap())
    });
}

fn bench_perplexity(c: &mut Criterion) {
    let ckpt = desk_model();
    let corpus = gen_corpus(CorpusKind::General, 7, 16_384, Split::Heldout).unwrap();
    let mut group = c.benchmark_group("perplexity_16k_tokens");
    group.sample_size(10);
    for &threads in &thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bch, &t| {
            bch.iter(|| with_threads(t, || perplexity(&ckpt, &corpus).unwrap()))
        });
    }
    group.finish();
}

fn bench_mcq(c: &mut Criterion) {
    let ckpt = desk_model();
    let tasks = gen_general_mcq(8, 64).unwrap();
    let mut group = c.benchmark_group("mcq_64_tasks");
    group.sample_size(10);
    for &threads in &thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bch, &t| {
            bch.iter(|| with_threads(t, || mcq_accuracy(&ckpt, &tasks).unwrap()))
        });
    }
    group.finish();
}

fn bench_angular_profile(c: &mut Criterion) {
    let ckpt = desk_model();
    let corpus = gen_corpus(CorpusKind::General, 9, 8_192, Split::Heldout).unwrap();
    let mut group = c.benchmark_group("angular_profile_64_seqs");
    group.sample_size(10);
    for &threads in &thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bch, &t| {
            bch.iter(|| {
                with_threads(t, || {
                    angular_profile(&ckpt, &corpus, CapturePosition::LastToken).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_removal_probe(c: &mut Criterion) {
    let ckpt = desk_model();
    let corpus = gen_corpus(CorpusKind::General, 10, 4_096, Split::Heldout).unwrap();
    let tasks = gen_general_mcq(11, 8).unwrap();
    let baseline = eval_suite(&ckpt, &corpus, &tasks).unwrap();
    let mut group = c.benchmark_group("removal_probe_l8");
    group.sample_size(10);
    for &threads in &thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bch, &t| {
            bch.iter(|| {
                with_threads(t, || {
                    removal_probe(&ckpt, &corpus, &tasks, &baseline).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_train_steps(c: &mut Criterion) {
    let ckpt = desk_model();
    let corpus = gen_corpus(CorpusKind::Domain, 12, 60_000, Split::Train).unwrap();
    let mask = FreezeMask::all_trainable(&ckpt);
    let mut group = c.benchmark_group("train_4_steps_batch8_t128");
    group.sample_size(10);
    for &threads in &thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bch, &t| {
            bch.iter(|| {
                with_threads(t, || {
                    let hyper = Hyper {
                        batch: 8,
                        seq_len: 128,
                        epochs: 1,
                        max_steps: Some(4),
                        ..Hyper::default()
                    };
                    cpt_train(&ckpt, &mask, &corpus, &hyper).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward,
    bench_perplexity,
    bench_mcq,
    bench_angular_profile,
    bench_removal_probe,
    bench_train_steps
);
criterion_main!(benches);
