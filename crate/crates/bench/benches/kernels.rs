//! Kernel-level benches: matmul, block-mask construction, block-sparse vs
//! dense attention, and FFD planning.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use prefix_dpo::masks::{BlockMask, MaskInputs, MaskKind, MaskSpec};
use prefix_dpo::model::{attention_block_sparse, attention_dense};
use prefix_dpo::numerics::Matrix;
use prefix_dpo::packing::ffd_pack;
use prefix_dpo::rng::{sample_normal, SeedSplitter};

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    let mut rng = SeedSplitter::new(seed).stream("bench-matrix");
    let data = (0..rows * cols)
        .map(|_| sample_normal(&mut rng, 1.0) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn prefix_spec(seq_len: usize) -> MaskSpec {
    let chosen_start = seq_len / 2;
    let rejected_start = 3 * seq_len / 4;
    MaskSpec::new(
        MaskKind::PrefixSharing,
        MaskInputs {
            batch_size: 1,
            seq_len,
            row_chosen_start: vec![chosen_start],
            row_rejected_start: vec![rejected_start],
            chosen_start: vec![vec![chosen_start; seq_len]],
            rejected_start: vec![vec![rejected_start; seq_len]],
            doc_ids: vec![vec![0; seq_len]],
            response_ids: vec![vec![0; seq_len]],
        },
    )
}

fn bench_matmul(c: &mut Criterion) {
    let a = rand_matrix(256, 256, 1);
    let b = rand_matrix(256, 256, 2);
    c.bench_function("matmul/256x256x256_f32", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn bench_block_mask_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_mask_build");
    for &seq_len in &[256usize, 512, 1024] {
        let spec = prefix_spec(seq_len);
        group.bench_with_input(
            BenchmarkId::new("prefix_l", seq_len),
            &spec,
            |bench, spec| bench.iter(|| black_box(BlockMask::build(spec.clone(), 128).unwrap())),
        );
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let seq_len = 256;
    let d = 64;
    let q = rand_matrix(seq_len, d, 3);
    let k = rand_matrix(seq_len, d, 4);
    let v = rand_matrix(seq_len, d, 5);
    let spec = prefix_spec(seq_len);
    let mask = BlockMask::build(spec.clone(), 32).unwrap();
    let mut group = c.benchmark_group("attention_l256_d64");
    group.bench_function("block_sparse", |bench| {
        bench.iter(|| black_box(attention_block_sparse(&q, &k, &v, 2, &mask, 0).unwrap()))
    });
    group.bench_function("dense_reference", |bench| {
        bench.iter(|| black_box(attention_dense(&q, &k, &v, 2, &spec, 0).unwrap()))
    });
    group.finish();
}

fn bench_ffd(c: &mut Criterion) {
    // Scrambled-but-deterministic unit lengths in 1..=512.
    let lengths: Vec<usize> = (0u64..10_000)
        .map(|i| 1 + (i.wrapping_mul(0x9e3779b97f4a7c15) >> 32) as usize % 512)
        .collect();
    c.bench_function("ffd_pack/10k_units", |bench| {
        bench.iter(|| black_box(ffd_pack(&lengths, 4096).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_block_mask_build,
    bench_attention,
    bench_ffd
);
criterion_main!(benches);
