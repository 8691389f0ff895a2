//! Compares the rayon-backed map with the sequential fallback on the two
//! hot batch loops: dense affinity construction and kNN prediction. Run with
//! `cargo bench -p flowgmm-core` (parallel) and
//! `cargo bench -p flowgmm-core --no-default-features` (sequential baseline
//! for the `*_seq` twins only).

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::hint::black_box;

use flowgmm_core::baselines::{knn_predict, sin2_distance, Metric};
use flowgmm_core::parallel::{map_indexed, map_indexed_seq};
use flowgmm_core::tensor::Matrix;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random::<f64>() + 0.1).collect(),
    )
    .unwrap()
}

fn affinity_row(x: &Matrix, i: usize) -> Vec<f64> {
    let n = x.rows;
    let mut row = vec![0.0; n];
    for j in 0..n {
        if j != i {
            row[j] = (-5.0 * sin2_distance(x.row(i), x.row(j)).unwrap()).exp();
        }
    }
    row
}

fn bench_affinity(c: &mut Criterion) {
    let x = random_matrix(300, 16, 1);
    let mut group = c.benchmark_group("affinity_rbf_300x16");
    group.bench_function("map_indexed", |b| {
        b.iter(|| black_box(map_indexed(x.rows, |i| affinity_row(&x, i))))
    });
    group.bench_function("map_indexed_seq", |b| {
        b.iter(|| black_box(map_indexed_seq(x.rows, |i| affinity_row(&x, i))))
    });
    group.finish();
}

fn bench_knn(c: &mut Criterion) {
    let train = random_matrix(500, 16, 2);
    let labels: Vec<i64> = (0..500).map(|i| (i % 3) as i64).collect();
    let queries = random_matrix(100, 16, 3);
    let mut group = c.benchmark_group("knn_500train_100queries");
    group.bench_function("predict_l2", |b| {
        b.iter(|| black_box(knn_predict(&train, &labels, &queries, 5, Metric::L2).unwrap()))
    });
    group.bench_function("predict_seq_oracle", |b| {
        // Same work expressed through the sequential map, as the comparison
        // baseline when the parallel feature is enabled.
        b.iter(|| {
            black_box(map_indexed_seq(queries.rows, |qi| {
                let one = queries.select_rows(&[qi]);
                knn_predict(&train, &labels, &one, 5, Metric::L2).unwrap()[0]
            }))
        })
    });
    group.finish();
}

criterion_group!(benches, bench_affinity, bench_knn);
criterion_main!(benches);
