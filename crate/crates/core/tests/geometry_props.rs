use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roofseg::geom::*;
use roofseg::roofgen::{generate_roof, normalize_unit_sphere, RoofFamily, RoofSpec};

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 4..max)
}

fn brute_knn(coords: &[Point3], i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..coords.len())
        .filter(|&j| j != i)
        .map(|j| (dist2(&coords[i], &coords[j]), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

fn min_pairwise(coords: &[Point3], idx: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            m = m.min(dist2(&coords[idx[a]], &coords[idx[b]]));
        }
    }
    m
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (a, b, c) = (angles[0], angles[1], angles[2]);
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz, ry), rx)
}

fn apply(r: &[[f64; 3]; 3], t: &Point3, p: &Point3) -> Point3 {
    let mut out = *t;
    for i in 0..3 {
        out[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_brute_force(coords in cloud_strategy(300), k in 1usize..12) {
        let k = k.min(coords.len() - 1);
        let table = NeighborTable::build(&coords, k).unwrap();
        for i in 0..coords.len() {
            prop_assert_eq!(table.neighbors(i).to_vec(), brute_knn(&coords, i, k));
        }
    }

    #[test]
    fn fps_is_deterministic_distinct_and_spread(coords in cloud_strategy(200), k in 2usize..16, seed in 0usize..4) {
        let k = k.min(coords.len());
        let seed = seed.min(coords.len() - 1);
        let a = farthest_point_sample_in(&coords, k, seed).unwrap();
        prop_assert_eq!(&a, &farthest_point_sample_in(&coords, k, seed).unwrap());
        prop_assert_eq!(a[0], seed);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        // greedy max-min is a 2-approximation of the optimal spread
        let mut rng = ChaCha8Rng::seed_from_u64(coords.len() as u64);
        let fps = min_pairwise(&coords, &a);
        for _ in 0..100 {
            let r = sample(&mut rng, coords.len(), k).into_vec();
            prop_assert!(fps >= min_pairwise(&coords, &r) / 4.0 - 1e-15);
        }
    }

    #[test]
    fn plane_fit_residuals_are_rigid_invariant(
        coords in cloud_strategy(120),
        angles in prop::array::uniform3(-3.1f64..3.1),
        t in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let Ok(p) = fit_plane_pca(&coords) else { return Ok(()) };
        let r = rotation(angles);
        let moved: Vec<Point3> = coords.iter().map(|x| apply(&r, &t, x)).collect();
        let q = fit_plane_pca(&moved).unwrap();
        for (a, b) in coords.iter().zip(&moved) {
            prop_assert!((p.distance(a) - q.distance(b)).abs() < 1e-9);
        }
    }

    #[test]
    fn coplanar_points_have_zero_residual(
        uv in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..80),
        angles in prop::array::uniform3(-3.1f64..3.1),
        t in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let r = rotation(angles);
        let pts: Vec<Point3> = uv.iter().map(|&(u, v)| apply(&r, &t, &[u, v, 0.0])).collect();
        let Ok(plane) = fit_plane_pca(&pts) else { return Ok(()) };
        let truth = [r[0][2], r[1][2], r[2][2]];
        prop_assert!(dot(&plane.normal, &truth).abs() > 1.0 - 1e-9);
        for p in &pts {
            prop_assert!(plane.distance(p) < 1e-9);
        }
    }

    #[test]
    fn edge_labels_ignore_label_ids(coords in cloud_strategy(100), labels in prop::collection::vec(0usize..4, 100), k in 1usize..8) {
        let n = coords.len();
        let k = k.min(n - 1);
        let labels = labels[..n].to_vec();
        let permuted: Vec<usize> = labels.iter().map(|&l| [2, 0, 3, 1][l]).collect();
        let a = edge_ground_truth(&PointCloud::new(coords.clone(), Some(labels)).unwrap(), k).unwrap();
        let b = edge_ground_truth(&PointCloud::new(coords, Some(permuted)).unwrap(), k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generated_roofs_are_normalized_and_reproducible(seed in 0u64..1000, fam in 0usize..7) {
        let spec = RoofSpec::random(RoofFamily::ALL[fam], 300, 0.005, seed);
        let a = generate_roof(&spec).unwrap();
        prop_assert_eq!(&a, &generate_roof(&spec).unwrap());
        let c = a.cloud.coords();
        let mut centroid = [0.0; 3];
        for p in c {
            for i in 0..3 {
                centroid[i] += p[i] / c.len() as f64;
            }
        }
        prop_assert!(dot(&centroid, &centroid).sqrt() <= 1e-9);
        let r = c.iter().map(|p| dot(p, p).sqrt()).fold(0.0, f64::max);
        prop_assert!((r - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn fps_beats_random_subsets_on_roofs() {
    for seed in 0..6u64 {
        let s = generate_roof(&RoofSpec::random(RoofFamily::ALL[seed as usize], 512, 0.005, seed)).unwrap();
        let c = s.cloud.coords();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in [8, 32, 128] {
            let fps = min_pairwise(c, &farthest_point_sample_in(c, k, 0).unwrap());
            for _ in 0..100 {
                let r = sample(&mut rng, c.len(), k).into_vec();
                assert!(fps >= min_pairwise(c, &r), "k = {k}");
            }
        }
    }
}

/// Height of the plane over `(x, y)` as `[a, b, c]` in `a x + b y + c`.
fn height_coeffs(p: &PlaneModel) -> [f64; 3] {
    let n = p.normal;
    [-n[0] / n[2], -n[1] / n[2], -p.offset / n[2]]
}

#[test]
fn noiseless_edge_flags_stay_near_facet_boundaries() {
    for (fam, seed) in [(RoofFamily::Gable, 1), (RoofFamily::Hip, 2), (RoofFamily::Pyramid, 3)] {
        let spec = RoofSpec::new(fam, 1024, 0.0, seed);
        let s = generate_roof(&spec).unwrap();
        let c = s.cloud.coords();
        let labels = s.labels();
        let planes: Vec<[f64; 3]> = (0..s.plane_count)
            .map(|f| {
                let idx: Vec<usize> = (0..c.len()).filter(|&j| labels[j] == f).collect();
                height_coeffs(&fit_plane_pca_indexed(c, &idx).unwrap())
            })
            .collect();
        let table = NeighborTable::build(c, spec.edge_k).unwrap();
        let mut flagged = 0;
        for j in 0..c.len() {
            if !s.edge.flags[j] {
                continue;
            }
            flagged += 1;
            let reach = table.neighbors(j).iter().map(|&i| dist2(&c[j], &c[i])).fold(0.0, f64::max).sqrt();
            // horizontal distance to the crease shared with some other facet
            let near = (0..s.plane_count).filter(|&f| f != labels[j]).any(|f| {
                let (a, b) = (planes[labels[j]], planes[f]);
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                (d[0] * c[j][0] + d[1] * c[j][1] + d[2]).abs() / d[0].hypot(d[1]) <= reach + 1e-9
            });
            assert!(near, "{fam:?} point {j}");
        }
        assert!(flagged > 0);
    }
}

#[test]
fn normalization_handles_translated_scaled_input() {
    let mut pts: Vec<Point3> = (0..50).map(|i| [100.0 + i as f64, -3.0 * i as f64, 7.0]).collect();
    normalize_unit_sphere(&mut pts);
    let r = pts.iter().map(|p| dot(p, p).sqrt()).fold(0.0, f64::max);
    assert!((r - 1.0).abs() < 1e-12);
}
