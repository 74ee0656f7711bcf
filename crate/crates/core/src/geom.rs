//! Geometry primitives shared by the data generator, the network and the
//! losses: brute-force neighbor search, farthest point sampling, PCA plane
//! fitting and edge labeling.
//!
//! Everything here works in `f64` regardless of the precision the network
//! runs at, and all functions are pure.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Point coordinates with optional per-point instance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite coordinate at point {i}")));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::invalid(format!(
                    "label count {} does not match point count {}",
                    l.len(),
                    coords.len()
                )));
            }
        }
        Ok(Self { coords, labels })
    }

    pub fn unlabeled(coords: Vec<Point3>) -> Result<Self> {
        Self::new(coords, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::invalid("label count does not match point count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Gathers a subset (or multiset) of points by index.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// The `k` nearest neighbors of point `index`, excluding the point itself.
/// Ties are broken by ascending index.
pub fn knn(cloud: &PointCloud, index: usize, k: usize) -> Result<Vec<usize>> {
    knn_in(cloud.coords(), index, k)
}

pub fn knn_in(coords: &[Point3], index: usize, k: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if index >= n {
        return Err(Error::invalid(format!("index {index} out of range for {n} points")));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k must satisfy 1 <= k <= N-1 (k = {k}, N = {n})"
        )));
    }
    let mut scratch = Vec::with_capacity(n);
    Ok(knn_with_scratch(coords, index, k, &mut scratch))
}

fn knn_with_scratch(
    coords: &[Point3],
    index: usize,
    k: usize,
    scratch: &mut Vec<(f64, usize)>,
) -> Vec<usize> {
    let q = coords[index];
    scratch.clear();
    scratch.extend(
        coords
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != index)
            .map(|(j, p)| (dist2(&q, p), j)),
    );
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    scratch.iter().map(|&(_, j)| j).collect()
}

/// Precomputed `k`-nearest-neighbor lists for every point of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn build(coords: &[Point3], k: usize) -> Result<Self> {
        let n = coords.len();
        if k == 0 || k >= n {
            return Err(Error::invalid(format!(
                "k must satisfy 1 <= k <= N-1 (k = {k}, N = {n})"
            )));
        }
        let mut indices = Vec::with_capacity(n * k);
        let mut scratch = Vec::with_capacity(n);
        for i in 0..n {
            indices.extend(knn_with_scratch(coords, i, k, &mut scratch));
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Greedy max-min sampling starting from `seed`. The returned indices are in
/// selection order; distance ties go to the lower index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: usize) -> Result<Vec<usize>> {
    farthest_point_sample_in(cloud.coords(), k, seed)
}

pub fn farthest_point_sample_in(coords: &[Point3], k: usize, seed: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "sample count must satisfy 1 <= k <= N (k = {k}, N = {n})"
        )));
    }
    if seed >= n {
        return Err(Error::invalid(format!("seed index {seed} out of range")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed;
    selected.push(current);
    min_d[current] = f64::NEG_INFINITY;
    while selected.len() < k {
        let c = coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, p) in coords.iter().enumerate() {
            if min_d[j] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(&c, p);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        current = best;
        min_d[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    Ok(selected)
}

/// Farthest point sampling with the first index drawn from `rng`.
pub fn farthest_point_sample_random<R: Rng + ?Sized>(
    coords: &[Point3],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if coords.is_empty() {
        return Err(Error::invalid("cannot sample from an empty cloud"));
    }
    let seed = rng.random_range(0..coords.len());
    farthest_point_sample_in(coords, k, seed)
}

/// A plane `{x : normal . x + offset = 0}` with a unit normal whose
/// largest-magnitude component is nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel {
    pub normal: Point3,
    pub offset: f64,
}

impl PlaneModel {
    /// Builds a plane from any nonzero normal and a point on the plane,
    /// normalizing and orienting the normal.
    pub fn from_point_normal(point: Point3, normal: Point3) -> Result<Self> {
        let norm = dot(&normal, &normal).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::degenerate("plane normal must be nonzero and finite"));
        }
        let mut n = [normal[0] / norm, normal[1] / norm, normal[2] / norm];
        orient(&mut n);
        Ok(Self {
            normal: n,
            offset: -dot(&n, &point),
        })
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        dot(&self.normal, p) + self.offset
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }
}

fn orient(n: &mut Point3) {
    let mut axis = 0;
    for i in 1..3 {
        if n[i].abs() > n[axis].abs() {
            axis = i;
        }
    }
    if n[axis] < 0.0 {
        for c in n.iter_mut() {
            *c = -*c;
        }
    }
}

/// Orthogonal distance from `point` to `plane`.
pub fn point_plane_distance(point: &Point3, plane: &PlaneModel) -> f64 {
    plane.distance(point)
}

/// Total-least-squares plane through `points`: the normal is the covariance
/// eigenvector with the smallest eigenvalue.
pub fn fit_plane_pca(points: &[Point3]) -> Result<PlaneModel> {
    fit_plane_pca_iter(points.iter().copied(), points.len())
}

/// Same as [`fit_plane_pca`] over the points of `coords` selected by `indices`.
pub fn fit_plane_pca_indexed(coords: &[Point3], indices: &[usize]) -> Result<PlaneModel> {
    fit_plane_pca_iter(indices.iter().map(|&i| coords[i]), indices.len())
}

fn fit_plane_pca_iter<I>(points: I, m: usize) -> Result<PlaneModel>
where
    I: Iterator<Item = Point3> + Clone,
{
    if m < 3 {
        return Err(Error::degenerate(format!(
            "plane fitting needs at least 3 points, got {m}"
        )));
    }
    let mut centroid = [0.0; 3];
    for p in points.clone() {
        for c in 0..3 {
            centroid[c] += p[c];
        }
    }
    for c in centroid.iter_mut() {
        *c /= m as f64;
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
        cov += d * d.transpose();
    }
    cov /= m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 0.0) || middle <= largest * 1e-12 {
        return Err(Error::degenerate("points are coincident or collinear"));
    }
    let v = eig.eigenvectors.column(order[0]);
    PlaneModel::from_point_normal(centroid, [v[0], v[1], v[2]])
}

/// Per-point boundary flags derived from instance labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeLabels {
    pub flags: Vec<bool>,
}

impl EdgeLabels {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// A point is an edge point iff one of its `k` nearest neighbors carries a
/// different instance label.
pub fn edge_ground_truth(cloud: &PointCloud, k: usize) -> Result<EdgeLabels> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("edge labeling requires instance labels"))?;
    let table = NeighborTable::build(cloud.coords(), k)?;
    Ok(edge_labels_from_table(labels, &table))
}

pub fn edge_labels_from_table(labels: &[usize], table: &NeighborTable) -> EdgeLabels {
    let flags = (0..labels.len())
        .map(|j| table.neighbors(j).iter().any(|&i| labels[i] != labels[j]))
        .collect();
    EdgeLabels { flags }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> Vec<Point3> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn knn_picks_nearest_and_excludes_self() {
        let cloud = PointCloud::unlabeled(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
            .unwrap();
        assert_eq!(knn(&cloud, 0, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_on_unit_line_breaks_ties_by_index() {
        let cloud = PointCloud::unlabeled(line(10)).unwrap();
        // 7 and 9 are both at distance 1, 6 at 2, then 5 and (nothing at 10).
        assert_eq!(knn(&cloud, 8, 4).unwrap(), vec![7, 9, 6, 5]);
        // query 5: 4,6 at 1; 3,7 at 2
        assert_eq!(knn(&cloud, 5, 4).unwrap(), vec![4, 6, 3, 7]);
    }

    #[test]
    fn knn_full_neighborhood_and_errors() {
        let cloud = PointCloud::unlabeled(line(6)).unwrap();
        let mut all = knn(&cloud, 2, 5).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 3, 4, 5]);
        assert!(matches!(knn(&cloud, 2, 6), Err(Error::InvalidArgument(_))));
        assert!(matches!(knn(&cloud, 2, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fps_seed_only_and_exhaustive() {
        let cloud = PointCloud::unlabeled(line(7)).unwrap();
        assert_eq!(farthest_point_sample(&cloud, 1, 0).unwrap(), vec![0]);
        let mut all = farthest_point_sample(&cloud, 7, 3).unwrap();
        assert_eq!(all[0], 3);
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(farthest_point_sample(&cloud, 8, 0).is_err());
    }

    #[test]
    fn fps_square_picks_corners() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let cloud = PointCloud::unlabeled(pts).unwrap();
        let s = farthest_point_sample(&cloud, 4, 0).unwrap();
        // opposite corner first, then the remaining corners by index
        assert_eq!(s, vec![0, 3, 1, 2]);
    }

    #[test]
    fn pca_on_unit_square() {
        let p = fit_plane_pca(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_abs_diff_eq!(p.normal[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.normal[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_rejects_degenerate_inputs() {
        assert!(matches!(
            fit_plane_pca(&[[0.0; 3], [1.0, 0.0, 0.0]]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            fit_plane_pca(&line(5)),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            fit_plane_pca(&[[1.0, 2.0, 3.0]; 4]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn plane_distances() {
        let z0 = PlaneModel::from_point_normal([0.0; 3], [0.0, 0.0, -2.0]).unwrap();
        assert_eq!(z0.normal, [0.0, 0.0, 1.0]);
        assert_eq!(point_plane_distance(&[0.0, 0.0, 1.0], &z0), 1.0);
        assert_eq!(point_plane_distance(&[3.0, -2.0, 0.0], &z0), 0.0);
        let diag = PlaneModel::from_point_normal([0.0; 3], [1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            point_plane_distance(&[1.0, 1.0, 1.0], &diag),
            3f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn orientation_tie_goes_to_first_axis() {
        let p = PlaneModel::from_point_normal([0.0; 3], [-1.0, 1.0, 0.0]).unwrap();
        assert!(p.normal[0] > 0.0 && p.normal[1] < 0.0);
    }

    #[test]
    fn edge_labels_single_plane_and_full_neighborhood() {
        let coords = line(8);
        let one = PointCloud::new(coords.clone(), Some(vec![0; 8])).unwrap();
        assert_eq!(edge_ground_truth(&one, 3).unwrap().count(), 0);
        let two = PointCloud::new(coords, Some(vec![0, 0, 0, 0, 1, 1, 1, 1])).unwrap();
        assert_eq!(edge_ground_truth(&two, 7).unwrap().count(), 8);
        let unlabeled = PointCloud::unlabeled(line(4)).unwrap();
        assert!(edge_ground_truth(&unlabeled, 2).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::unlabeled(vec![]).is_err());
        assert!(PointCloud::unlabeled(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![0, 1])).is_err());
    }
}
