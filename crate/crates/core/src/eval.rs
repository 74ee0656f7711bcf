//! Instance metrics (coverage, weighted coverage, precision, recall) and two
//! classical plane segmentation baselines.
//!
//! Coverage uses the best IoU of each ground-truth instance against any
//! prediction (many-to-one). Precision and recall count a greedy one-to-one
//! matching: candidate pairs at or above the IoU threshold are taken in
//! descending IoU order, ties to the lower ground-truth then prediction
//! index. Negative labels mean "unassigned" and belong to no instance.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{fit_plane_pca_indexed, NeighborTable, PlaneModel, Point3};
use crate::maskhead::SegmentationResult;

pub const DEFAULT_IOU: f64 = 0.5;

/// Metrics of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub cov: f64,
    pub wcov: f64,
    pub prec: f64,
    pub rec: f64,
    pub gt_instances: usize,
    pub pred_instances: usize,
}

/// Per-sample metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mCov")]
    pub m_cov: f64,
    #[serde(rename = "mWCov")]
    pub m_wcov: f64,
    #[serde(rename = "mPrec")]
    pub m_prec: f64,
    #[serde(rename = "mRec")]
    pub m_rec: f64,
    pub iou_threshold: f64,
    pub coverage_matching: String,
    pub precision_matching: String,
    pub samples: Vec<SampleMetrics>,
    #[serde(default)]
    pub sample_names: Vec<String>,
}

impl MetricsReport {
    /// Averages `samples`; an empty list yields zeros.
    pub fn aggregate(samples: Vec<SampleMetrics>, names: Vec<String>, iou_threshold: f64) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            m_cov: mean(|s| s.cov),
            m_wcov: mean(|s| s.wcov),
            m_prec: mean(|s| s.prec),
            m_rec: mean(|s| s.rec),
            iou_threshold,
            coverage_matching: "max-iou".into(),
            precision_matching: "greedy-one-to-one".into(),
            samples,
            sample_names: names,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("metrics json: {e}")))
    }

    /// One row per sample followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,cov,wcov,prec,rec,gt_instances,pred_instances\n");
        for (i, s) in self.samples.iter().enumerate() {
            let name = self.sample_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{:.6},{},{}",
                s.cov, s.wcov, s.prec, s.rec, s.gt_instances, s.pred_instances
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6},{:.6},,",
            self.m_cov, self.m_wcov, self.m_prec, self.m_rec
        );
        out
    }
}

/// Point index sets keyed by label, ascending.
fn instances(labels: &[i64]) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (j, &l) in labels.iter().enumerate() {
        if l >= 0 {
            map.entry(l).or_default().push(j);
        }
    }
    map.into_values().collect()
}

/// `G x P` IoU table.
pub fn iou_table(pred: &[i64], gt: &[i64]) -> Result<Vec<Vec<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction has {} labels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let gi = instances(gt);
    let pi = instances(pred);
    let mut pred_slot = vec![usize::MAX; pred.len()];
    for (p, pts) in pi.iter().enumerate() {
        for &j in pts {
            pred_slot[j] = p;
        }
    }
    let mut table = vec![vec![0.0; pi.len()]; gi.len()];
    for (g, pts) in gi.iter().enumerate() {
        let mut inter = vec![0usize; pi.len()];
        for &j in pts {
            if pred_slot[j] != usize::MAX {
                inter[pred_slot[j]] += 1;
            }
        }
        for p in 0..pi.len() {
            if inter[p] > 0 {
                let union = pts.len() + pi[p].len() - inter[p];
                table[g][p] = inter[p] as f64 / union as f64;
            }
        }
    }
    Ok(table)
}

/// Greedy one-to-one matching of pairs with IoU at least `threshold`.
pub fn greedy_matches(table: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (g, row) in table.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            if v >= threshold && v > 0.0 {
                pairs.push((g, p, v));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let p_count = table.first().map_or(0, |r| r.len());
    let mut gt_used = vec![false; table.len()];
    let mut pred_used = vec![false; p_count];
    let mut out = Vec::new();
    for (g, p, _) in pairs {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            out.push((g, p));
        }
    }
    out
}

pub fn compute_metrics(pred: &[i64], gt: &[i64], iou_threshold: f64) -> Result<SampleMetrics> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let table = iou_table(pred, gt)?;
    let gi = instances(gt);
    if gi.is_empty() {
        return Err(Error::invalid("ground truth has no instances"));
    }
    let p_count = instances(pred).len();
    let total: usize = gi.iter().map(Vec::len).sum();
    let best: Vec<f64> = table.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let cov = best.iter().sum::<f64>() / gi.len() as f64;
    let wcov = gi
        .iter()
        .zip(&best)
        .map(|(g, &b)| g.len() as f64 / total as f64 * b)
        .sum::<f64>();
    let matched = greedy_matches(&table, iou_threshold).len();
    let prec = if p_count == 0 { 0.0 } else { matched as f64 / p_count as f64 };
    let rec = matched as f64 / gi.len() as f64;
    Ok(SampleMetrics {
        cov,
        wcov,
        prec,
        rec,
        gt_instances: gi.len(),
        pred_instances: p_count,
    })
}

/// Metrics over a dataset of `(prediction, ground truth)` pairs.
pub fn evaluate_dataset(pairs: &[(Vec<i64>, Vec<i64>)], iou_threshold: f64) -> Result<MetricsReport> {
    let samples = pairs
        .iter()
        .map(|(p, g)| compute_metrics(p, g, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::aggregate(samples, Vec::new(), iou_threshold))
}

pub fn labels_to_i64(labels: &[usize]) -> Vec<i64> {
    labels.iter().map(|&l| l as i64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub dist_threshold: f64,
    pub min_inliers: usize,
    pub max_planes: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            dist_threshold: 0.02,
            min_inliers: 50,
            max_planes: 8,
            iterations: 500,
            seed: 0,
        }
    }
}

fn plane_through(a: &Point3, b: &Point3, c: &Point3) -> Option<PlaneModel> {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let scale = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    let nn = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
    if !(nn > 1e-18 * scale) {
        return None;
    }
    PlaneModel::from_point_normal(*a, n).ok()
}

fn nearest_plane(planes: &[PlaneModel], p: &Point3) -> usize {
    let mut best = 0;
    for (i, pl) in planes.iter().enumerate().skip(1) {
        if pl.distance(p) < planes[best].distance(p) {
            best = i;
        }
    }
    best
}

fn single_cluster(n: usize) -> SegmentationResult {
    SegmentationResult {
        labels: vec![0; n],
        confidence: vec![0.0; n],
        positive: vec![0],
    }
}

/// Sequential RANSAC: extracts the plane with the most inliers among the
/// remaining points, refits it by PCA, removes its inliers and repeats.
/// Leftover points join the nearest extracted plane. Confidence is 1 for
/// inliers and 0 for attached points.
pub fn ransac_segment(coords: &[Point3], config: &RansacConfig) -> Result<SegmentationResult> {
    if !(config.dist_threshold > 0.0) || config.min_inliers == 0 || config.max_planes == 0 || config.iterations == 0 {
        return Err(Error::invalid("RANSAC thresholds and counts must be positive"));
    }
    let n = coords.len();
    if n == 0 {
        return Err(Error::invalid("empty point cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels = vec![usize::MAX; n];
    let mut planes: Vec<PlaneModel> = Vec::new();
    let mut remaining: Vec<usize> = (0..n).collect();
    while planes.len() < config.max_planes && remaining.len() >= config.min_inliers.max(3) {
        let mut best: Option<(usize, PlaneModel)> = None;
        for _ in 0..config.iterations {
            let pick = sample(&mut rng, remaining.len(), 3);
            let (a, b, c) = (remaining[pick.index(0)], remaining[pick.index(1)], remaining[pick.index(2)]);
            let Some(plane) = plane_through(&coords[a], &coords[b], &coords[c]) else {
                continue;
            };
            let count = remaining
                .iter()
                .filter(|&&j| plane.distance(&coords[j]) <= config.dist_threshold)
                .count();
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, plane));
            }
        }
        let Some((count, mut plane)) = best else { break };
        if count < config.min_inliers {
            break;
        }
        let inliers: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&j| plane.distance(&coords[j]) <= config.dist_threshold)
            .collect();
        if let Ok(refit) = fit_plane_pca_indexed(coords, &inliers) {
            let refined: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&j| refit.distance(&coords[j]) <= config.dist_threshold)
                .collect();
            if refined.len() >= inliers.len() {
                plane = refit;
            }
        }
        let id = planes.len();
        planes.push(plane);
        remaining.retain(|&j| {
            if plane.distance(&coords[j]) <= config.dist_threshold {
                labels[j] = id;
                false
            } else {
                true
            }
        });
    }
    if planes.is_empty() {
        return Ok(single_cluster(n));
    }
    let mut confidence = vec![1.0; n];
    for &j in &remaining {
        labels[j] = nearest_plane(&planes, &coords[j]);
        confidence[j] = 0.0;
    }
    Ok(SegmentationResult {
        labels,
        confidence,
        positive: (0..planes.len()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionGrowConfig {
    pub normal_k: usize,
    /// Radians.
    pub angle_threshold: f64,
    pub dist_threshold: f64,
    /// Points with a larger surface variation never start a segment.
    pub seed_curvature: f64,
    /// Segments smaller than this are dissolved into their neighbors.
    pub min_segment: usize,
}

impl Default for RegionGrowConfig {
    fn default() -> Self {
        Self {
            normal_k: 16,
            angle_threshold: 10f64.to_radians(),
            dist_threshold: 0.02,
            seed_curvature: 0.02,
            min_segment: 20,
        }
    }
}

/// Ascending covariance eigenvalues and the eigenvector of the smallest.
fn principal_axes(coords: &[Point3], indices: impl Iterator<Item = usize> + Clone) -> ([f64; 3], Point3) {
    let m = indices.clone().count().max(1) as f64;
    let mut c = [0.0; 3];
    for j in indices.clone() {
        for a in 0..3 {
            c[a] += coords[j][a] / m;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for j in indices {
        let d = Vector3::new(coords[j][0] - c[0], coords[j][1] - c[1], coords[j][2] - c[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let v = eig.eigenvectors.column(order[0]);
    (order.map(|i| eig.eigenvalues[i].max(0.0)), [v[0], v[1], v[2]])
}

/// Unit normal and surface variation of the neighborhood of each point.
pub fn estimate_normals(coords: &[Point3], table: &NeighborTable) -> Vec<(Point3, f64)> {
    (0..coords.len())
        .map(|i| {
            let nb = table.neighbors(i);
            let (ev, normal) = principal_axes(coords, nb.iter().copied().chain(std::iter::once(i)));
            let total = ev.iter().sum::<f64>();
            (normal, if total > 0.0 { ev[0] / total } else { 0.0 })
        })
        .collect()
}

/// Region growing over the k-nearest-neighbor graph. Seeds are taken in
/// order of increasing surface variation; a neighbor joins when its normal
/// is within `angle_threshold` of the seed normal and it lies within
/// `dist_threshold` of the seed's tangent plane.
pub fn region_grow_segment(coords: &[Point3], config: &RegionGrowConfig) -> Result<SegmentationResult> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::invalid("empty point cloud"));
    }
    if n < 4 {
        return Ok(single_cluster(n));
    }
    let table = NeighborTable::build(coords, config.normal_k.clamp(3, n - 1))?;
    let normals = estimate_normals(coords, &table);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| normals[a].1.total_cmp(&normals[b].1).then(a.cmp(&b)));
    let cos_limit = config.angle_threshold.cos();
    let mut seg = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for &s in &order {
        if seg[s] != usize::MAX || normals[s].1 > config.seed_curvature {
            continue;
        }
        let id = members.len();
        let Ok(mut plane) = PlaneModel::from_point_normal(coords[s], normals[s].0) else { continue };
        seg[s] = id;
        let mut list = vec![s];
        let mut refit_at = 16;
        queue.push_back(s);
        while let Some(i) = queue.pop_front() {
            if list.len() >= refit_at {
                if let Ok(p) = fit_plane_pca_indexed(coords, &list) {
                    plane = p;
                }
                refit_at = list.len() * 2;
            }
            let normal = plane.normal;
            for &j in table.neighbors(i) {
                if seg[j] != usize::MAX {
                    continue;
                }
                let nj = normals[j].0;
                let c = (nj[0] * normal[0] + nj[1] * normal[1] + nj[2] * normal[2]).abs();
                if c >= cos_limit && plane.distance(&coords[j]) <= config.dist_threshold {
                    seg[j] = id;
                    list.push(j);
                    queue.push_back(j);
                }
            }
        }
        members.push(list);
    }
    // thin strips along creases are not planar patches
    let kept: Vec<usize> = (0..members.len())
        .filter(|&s| {
            if members[s].len() < config.min_segment.max(3) {
                return false;
            }
            let (ev, _) = principal_axes(coords, members[s].iter().copied());
            ev[1] >= 0.01 * ev[2]
        })
        .collect();
    let planes: Vec<PlaneModel> = kept
        .iter()
        .filter_map(|&s| fit_plane_pca_indexed(coords, &members[s]).ok())
        .collect();
    if planes.len() != kept.len() || planes.is_empty() {
        return Ok(single_cluster(n));
    }
    let mut relabel = vec![usize::MAX; members.len()];
    for (new, &s) in kept.iter().enumerate() {
        relabel[s] = new;
    }
    let mut labels = vec![0; n];
    let mut confidence = vec![1.0; n];
    for j in 0..n {
        let r = if seg[j] == usize::MAX { usize::MAX } else { relabel[seg[j]] };
        if r == usize::MAX {
            labels[j] = nearest_plane(&planes, &coords[j]);
            confidence[j] = 0.0;
        } else {
            labels[j] = r;
        }
    }
    Ok(SegmentationResult {
        labels,
        confidence,
        positive: (0..planes.len()).collect(),
    })
}
