use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdc_core::linalg::Matrix;
use mdc_core::signal::{istft, stft};
use mdc_core::{
    affinity_loss_expanded, affinity_loss_gradient, affinity_loss_pairwise, kmeans, simplex_vertices,
    EmbeddingMatrix, KMeansConfig, Network, NetworkConfig, StftConfig, TargetMatrix, TargetMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("affinity_loss");
    for rows in [256, 1024, 4096] {
        let v = EmbeddingMatrix::normalize(random_matrix(&mut rng, rows, 20)).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..2)).collect();
        let y = TargetMatrix::from_labels(&labels, 2, TargetMode::Simplex).unwrap();
        group.bench_with_input(BenchmarkId::new("expanded", rows), &rows, |b, _| {
            b.iter(|| affinity_loss_expanded(&v, &y).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("expanded_with_gradient", rows), &rows, |b, _| {
            b.iter(|| affinity_loss_gradient(&v, &y).unwrap())
        });
        if rows <= 1024 {
            group.bench_with_input(BenchmarkId::new("pairwise", rows), &rows, |b, _| {
                b.iter(|| affinity_loss_pairwise(&v, &y).unwrap())
            });
        }
    }
    group.finish();
}

fn signal(c: &mut Criterion) {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..cfg.sample_rate as usize).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = stft(&x, &cfg).unwrap();
    c.bench_function("stft_1s", |b| b.iter(|| stft(&x, &cfg).unwrap()));
    c.bench_function("istft_1s", |b| b.iter(|| istft(&spec, &cfg).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let sv = simplex_vertices(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..3000)
        .map(|i| sv.vertex(i % 3).iter().map(|x| x + rng.random_range(-0.1..0.1)).collect())
        .collect();
    let points = Matrix::from_rows(&rows).unwrap();
    let cfg = KMeansConfig::new(3);
    c.bench_function("kmeans_3000x3_k3", |b| b.iter(|| kmeans(&points, &cfg).unwrap()));
}

fn network(c: &mut Criterion) {
    let cfg = NetworkConfig {
        context: 3,
        hidden: vec![64],
        embedding_dim: 8,
        with_mi_head: true,
        ..NetworkConfig::default()
    };
    let net = Network::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features = random_matrix(&mut rng, 62, cfg.feature_dim());
    c.bench_function("network_forward_62_frames", |b| b.iter(|| net.forward(&features).unwrap()));
    let trace = net.forward_trace(&features).unwrap();
    let upstream = random_matrix(&mut rng, 62 * cfg.input_dim, cfg.embedding_dim);
    c.bench_function("network_backward_62_frames", |b| {
        b.iter(|| net.backward(&trace, Some(&upstream), None).unwrap())
    });
}

criterion_group!(benches, losses, signal, clustering, network);
criterion_main!(benches);
