use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roofseg::geom::{farthest_point_sample_in, fit_plane_pca, NeighborTable, PointCloud};
use roofseg::loss::{detect_outliers_weights, hungarian_match};
use roofseg::roofgen::{generate_roof, RoofFamily, RoofSpec};

fn roof(n: usize) -> Vec<[f64; 3]> {
    generate_roof(&RoofSpec::random(RoofFamily::CrossHipped, n, 0.005, 1)).unwrap().cloud.coords().to_vec()
}

fn neighbors(c: &mut Criterion) {
    let mut g = c.benchmark_group("knn");
    for n in [512, 2048] {
        let pts = roof(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, p| b.iter(|| NeighborTable::build(p, 30).unwrap()));
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let pts = roof(2048);
    c.bench_function("fps 2048 -> 512", |b| b.iter(|| farthest_point_sample_in(&pts, 512, 0).unwrap()));
    c.bench_function("plane fit 2048", |b| b.iter(|| fit_plane_pca(&pts).unwrap()));
}

fn losses(c: &mut Criterion) {
    let pts = roof(2048);
    let cloud = PointCloud::unlabeled(pts.clone()).unwrap();
    let mask: Vec<bool> = pts.iter().map(|p| p[0] > 0.0).collect();
    c.bench_function("outlier weights 2048", |b| b.iter(|| detect_outliers_weights(&cloud, &mask, 10).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cost = Array2::from_shape_fn((16, 12), |_| rng.random_range(0.0..3.0));
    c.bench_function("hungarian 16x12", |b| b.iter(|| hungarian_match(&cost).unwrap()));
}

criterion_group!(benches, neighbors, sampling, losses);
criterion_main!(benches);
