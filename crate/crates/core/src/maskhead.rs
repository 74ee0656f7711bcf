//! Query-to-point affinities, edge and semantic branches, edge-aware mask
//! refinement and the final merge of masks into per-point labels.

use ndarray::Array2;

use crate::backbone::FEATURE_WIDTH;
use crate::error::{Error, Result};
use crate::geom::{fit_plane_pca_indexed, PlaneModel, Point3};
use crate::nn::{Ctx, Init, Linear, Mlp, SelfAttention};
use crate::tape::{Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceEncoding {
    /// The scalar distance repeated across every channel.
    Tiled,
    /// Sines and cosines of the distance at geometric frequencies.
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadConfig {
    pub branch_dropout: f64,
    pub attention_inner: usize,
    pub attention_dropout: f64,
    pub distance_encoding: DistanceEncoding,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self {
            branch_dropout: 0.1,
            attention_inner: 64,
            attention_dropout: 0.3,
            distance_encoding: DistanceEncoding::Tiled,
        }
    }
}

pub struct MaskHead {
    pub config: MaskHeadConfig,
    pub edge: Mlp,
    pub semantic: Mlp,
    pub fuse: Linear,
    pub attention: SelfAttention,
}

/// Result of refining one mask.
pub struct Refinement {
    /// Refined logits, `1 x N`.
    pub logits: Var,
    /// True when no plane could be fitted and the input row was returned.
    pub skipped: bool,
    pub plane: Option<PlaneModel>,
}

pub fn encode_distance(d: f64, encoding: DistanceEncoding, width: usize) -> Vec<f64> {
    match encoding {
        DistanceEncoding::Tiled => vec![d; width],
        DistanceEncoding::Sinusoidal => {
            let half = width / 2;
            let mut out = Vec::with_capacity(width);
            for j in 0..half {
                let freq = 1000f64.powf(j as f64 / half as f64);
                out.push((d * freq).sin());
            }
            for j in 0..half {
                let freq = 1000f64.powf(j as f64 / half as f64);
                out.push((d * freq).cos());
            }
            out
        }
    }
}

/// Plane through the non-edge points of `mask`, falling back to every
/// masked point. `None` when fewer than 3 points or a degenerate fit.
pub fn refinement_plane(coords: &[Point3], mask: &[bool], edge: &[bool]) -> Option<PlaneModel> {
    let interior: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] && !edge[j]).collect();
    if interior.len() >= 3 {
        if let Ok(p) = fit_plane_pca_indexed(coords, &interior) {
            return Some(p);
        }
    }
    let all: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    if all.len() >= 3 {
        return fit_plane_pca_indexed(coords, &all).ok();
    }
    None
}

/// Distances of the edge points to `plane`, in edge-index order.
pub fn edge_plane_distances(coords: &[Point3], edge: &[bool], plane: &PlaneModel) -> Vec<(usize, f64)> {
    (0..edge.len())
        .filter(|&j| edge[j])
        .map(|j| (j, plane.distance(&coords[j])))
        .collect()
}

impl MaskHead {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: MaskHeadConfig) -> Self {
        let w = FEATURE_WIDTH;
        Self {
            edge: init.mlp("head.edge", &[w, 128, 1], false),
            semantic: init.mlp("head.semantic", &[w, 128, 1], false),
            fuse: init.linear("head.eamm.fuse", 2 * w, w, true),
            attention: SelfAttention::new(init, "head.eamm.attn", w, config.attention_inner, config.attention_dropout),
            config,
        }
    }

    /// `K x N` dot products between refined queries and point features, scaled
    /// by the inverse square root of the width.
    pub fn compute_affinity<T: Real>(&self, ctx: &mut Ctx<'_, T>, queries: Var, features: Var) -> Result<Var> {
        compute_affinity(ctx, queries, features)
    }

    /// Edge logits, `N x 1`.
    pub fn edge_logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Var {
        self.edge.forward_with_dropout(ctx, features, self.config.branch_dropout)
    }

    /// Semantic logits, `K x 1`.
    pub fn semantic_logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, queries: Var) -> Var {
        self.semantic.forward_with_dropout(ctx, queries, self.config.branch_dropout)
    }

    /// Replaces edge-point features by the fusion of their features with
    /// their distances to `plane`, then applies self-attention over all points.
    pub fn edge_aware_features<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: Var,
        coords: &[Point3],
        edge: &[bool],
        plane: &PlaneModel,
    ) -> Var {
        let n = coords.len();
        let dists = edge_plane_distances(coords, edge, plane);
        let merged = if dists.is_empty() {
            features
        } else {
            let edge_idx: Vec<usize> = dists.iter().map(|&(j, _)| j).collect();
            let rest: Vec<usize> = (0..n).filter(|&j| !edge[j]).collect();
            let w = FEATURE_WIDTH;
            let mut dist_feat = Array2::zeros((edge_idx.len(), w));
            for (r, &(_, d)) in dists.iter().enumerate() {
                for (c, v) in encode_distance(d, self.config.distance_encoding, w).into_iter().enumerate() {
                    dist_feat[[r, c]] = T::of(v);
                }
            }
            let dist_feat = ctx.tape.constant(dist_feat);
            let e_init = ctx.tape.gather_rows(features, &edge_idx);
            let cat = ctx.tape.concat_cols(&[e_init, dist_feat]);
            let fused = self.fuse.forward(ctx, cat);
            if rest.is_empty() {
                fused
            } else {
                let untouched = ctx.tape.gather_rows(features, &rest);
                let stacked = ctx.tape.concat_rows(&[fused, untouched]);
                // stacked row of every original point
                let mut order = vec![0usize; n];
                for (r, &j) in edge_idx.iter().enumerate() {
                    order[j] = r;
                }
                for (r, &j) in rest.iter().enumerate() {
                    order[j] = edge_idx.len() + r;
                }
                ctx.tape.gather_rows(stacked, &order)
            }
        };
        self.attention.forward(ctx, merged)
    }

    /// Refined logits of mask `i` given its binary mask, the predicted edge
    /// mask, point features and the query row `query` (`1 x 256`).
    #[allow(clippy::too_many_arguments)]
    pub fn eamm_refine<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        affinity_row: Var,
        mask: &[bool],
        edge: &[bool],
        features: Var,
        query: Var,
        coords: &[Point3],
    ) -> Refinement {
        let Some(plane) = refinement_plane(coords, mask, edge) else {
            return Refinement {
                logits: affinity_row,
                skipped: true,
                plane: None,
            };
        };
        Refinement {
            logits: self.refine_with_plane(ctx, query, features, coords, edge, &plane),
            skipped: false,
            plane: Some(plane),
        }
    }

    /// Refined logits of one query against a given refinement plane.
    pub fn refine_with_plane<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        query: Var,
        features: Var,
        coords: &[Point3],
        edge: &[bool],
        plane: &PlaneModel,
    ) -> Var {
        let refined = self.edge_aware_features(ctx, features, coords, edge, plane);
        ctx.tape.matmul_nt(query, refined, affinity_scale())
    }
}

pub fn compute_affinity<T: Real>(ctx: &mut Ctx<'_, T>, queries: Var, features: Var) -> Result<Var> {
    let (_, qw) = ctx.tape.shape(queries);
    let (_, fw) = ctx.tape.shape(features);
    if qw != fw {
        return Err(Error::invalid(format!("query width {qw} differs from feature width {fw}")));
    }
    Ok(ctx.tape.matmul_nt(queries, features, T::of(1.0 / (qw as f64).sqrt())))
}

fn affinity_scale<T: Real>() -> T {
    T::of(1.0 / (FEATURE_WIDTH as f64).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain-valued masks and scores derived from logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub affinity: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub masks: Vec<Vec<bool>>,
    pub scores: Vec<f64>,
    pub edge_heatmap: Vec<f64>,
    pub edge_mask: Vec<bool>,
}

impl MaskSet {
    pub fn from_logits(affinity: Array2<f64>, semantic_logits: &[f64], edge_logits: &[f64]) -> Self {
        let probabilities = affinity.mapv(sigmoid);
        let masks = probabilities
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&p| p >= 0.5).collect())
            .collect();
        let edge_heatmap: Vec<f64> = edge_logits.iter().map(|&x| sigmoid(x)).collect();
        Self {
            masks,
            scores: semantic_logits.iter().map(|&x| sigmoid(x)).collect(),
            edge_mask: edge_heatmap.iter().map(|&h| h >= 0.5).collect(),
            edge_heatmap,
            probabilities,
            affinity,
        }
    }

    pub fn queries(&self) -> usize {
        self.affinity.nrows()
    }
}

/// Per-point labels (mask indices) with the winning `score * probability`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Masks allowed to claim points.
    pub positive: Vec<usize>,
}

impl SegmentationResult {
    pub fn labels_i64(&self) -> Vec<i64> {
        self.labels.iter().map(|&l| l as i64).collect()
    }
}

/// Assigns each point to the positive mask maximizing `score * probability`;
/// ties go to the lower mask index. Without positive masks the single best
/// scoring mask is used.
pub fn merge_masks(probabilities: &Array2<f64>, scores: &[f64]) -> Result<SegmentationResult> {
    let k = probabilities.nrows();
    if k == 0 || scores.len() != k {
        return Err(Error::invalid(format!(
            "merge needs matching nonzero query counts, got {k} masks and {} scores",
            scores.len()
        )));
    }
    let mut positive: Vec<usize> = (0..k).filter(|&i| scores[i] >= 0.5).collect();
    if positive.is_empty() {
        let best = (0..k).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        positive.push(best);
    }
    let n = probabilities.ncols();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for j in 0..n {
        let mut best = positive[0];
        let mut bv = scores[best] * probabilities[[best, j]];
        for &i in &positive[1..] {
            let v = scores[i] * probabilities[[i, j]];
            if v > bv {
                best = i;
                bv = v;
            }
        }
        labels.push(best);
        confidence.push(bv);
    }
    Ok(SegmentationResult {
        labels,
        confidence,
        positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::roofgen::{generate_roof, RoofFamily, RoofSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> (ParamStore<f64>, MaskHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = MaskHead::new(&mut Init { store: &mut store, rng: &mut rng }, MaskHeadConfig::default());
        (store, h)
    }

    #[test]
    fn merge_example_and_fallback() {
        let probs = Array2::from_shape_vec((2, 1), vec![0.7, 0.95]).unwrap();
        let r = merge_masks(&probs, &[0.9, 0.6]).unwrap();
        assert_eq!(r.labels, vec![0]);
        assert!((r.confidence[0] - 0.63).abs() < 1e-12);
        let r = merge_masks(&probs, &[0.2, 0.4]).unwrap();
        assert_eq!(r.positive, vec![1]);
        assert_eq!(r.labels, vec![1]);
        let probs = Array2::from_elem((3, 4), 0.5);
        let r = merge_masks(&probs, &[0.1, 0.8, 0.2]).unwrap();
        assert!(r.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn zero_queries_give_all_positive_masks() {
        let m = MaskSet::from_logits(Array2::zeros((2, 3)), &[0.0, 0.0], &[0.0; 3]);
        assert!(m.masks.iter().flatten().all(|&b| b));
        assert!(m.edge_mask.iter().all(|&b| b));
        assert!(m.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn affinity_matches_triple_loop() {
        let (store, _) = head();
        let q = Array2::from_shape_fn((3, 256), |(i, j)| ((i * 31 + j) as f64).sin());
        let f = Array2::from_shape_fn((5, 256), |(i, j)| ((i * 17 + 3 * j) as f64).cos());
        let mut ctx = Ctx::eval(&store);
        let qv = ctx.tape.constant(q.clone());
        let fv = ctx.tape.constant(f.clone());
        let a = compute_affinity(&mut ctx, qv, fv).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for c in 0..256 {
                    s += q[[i, c]] * f[[j, c]];
                }
                assert!((ctx.value(a)[[i, j]] - s / 16.0).abs() < 1e-12);
            }
        }
        let bad = ctx.tape.constant(Array2::zeros((5, 128)));
        assert!(compute_affinity(&mut ctx, qv, bad).is_err());
    }

    #[test]
    fn zero_branches_give_half() {
        let (mut store, h) = head();
        for l in h.edge.layers.iter().chain(&h.semantic.layers) {
            store.value_mut(l.weight).fill(0.0);
            store.value_mut(l.bias.unwrap()).fill(0.0);
        }
        let mut ctx = Ctx::eval(&store);
        let f = ctx.tape.constant(Array2::from_elem((4, 256), 0.3));
        let e = h.edge_logits(&mut ctx, f);
        let s = h.semantic_logits(&mut ctx, f);
        assert!(ctx.value(e).iter().chain(ctx.value(s).iter()).all(|&x| sigmoid(x) == 0.5));
    }

    #[test]
    fn skipped_refinement_returns_row_unchanged() {
        let (store, h) = head();
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.5]];
        let mut ctx = Ctx::eval(&store);
        let f = ctx.tape.constant(Array2::from_elem((4, 256), 0.1));
        let q = ctx.tape.constant(Array2::from_elem((1, 256), 0.2));
        let row = ctx.tape.constant(Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let r = h.eamm_refine(&mut ctx, row, &[true, true, false, false], &[false; 4], f, q, &coords);
        assert!(r.skipped);
        assert_eq!(r.logits, row);
    }

    #[test]
    fn no_edges_and_identity_attention_keep_affinity() {
        let (mut store, h) = head();
        // identity attention block: zero output projection and unit layer norm on normalized rows
        store.value_mut(h.attention.out.weight).fill(0.0);
        store.value_mut(h.attention.out.bias.unwrap()).fill(0.0);
        let n = 6;
        let coords: Vec<Point3> = (0..n).map(|i| [(i % 3) as f64, (i / 3) as f64, 0.0]).collect();
        // rows with zero mean and unit variance pass layer norm unchanged (up to eps)
        let f0 = Array2::from_shape_fn((n, 256), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let mut ctx = Ctx::eval(&store);
        let f = ctx.tape.constant(f0.clone());
        let q0 = Array2::from_shape_fn((1, 256), |(_, j)| (j as f64 * 0.1).sin());
        let q = ctx.tape.constant(q0.clone());
        let a = ctx.tape.matmul_nt(q, f, 1.0 / 16.0);
        let r = h.eamm_refine(&mut ctx, a, &[true; 6], &[false; 6], f, q, &coords);
        assert!(!r.skipped);
        for (x, y) in ctx.value(r.logits).iter().zip(ctx.value(a).iter()) {
            assert!((x - y).abs() < 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn gable_edge_distances_follow_dihedral_geometry() {
        let spec = RoofSpec::new(RoofFamily::Gable, 1500, 0.0, 4);
        let s = generate_roof(&spec).unwrap();
        let labels = s.labels();
        let coords = s.cloud.coords();
        let mask: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        let plane = refinement_plane(coords, &mask, &s.edge.flags).unwrap();
        let pitch = spec.pitch;
        let facet1 = refinement_plane(coords, &labels.iter().map(|&l| l == 1).collect::<Vec<_>>(), &s.edge.flags).unwrap();
        // ridge line (along x): solve both plane equations in (y, z)
        let (a, b) = (plane.normal, facet1.normal);
        let det = a[1] * b[2] - a[2] * b[1];
        let ridge_y = (-plane.offset * b[2] + facet1.offset * a[2]) / det;
        for (j, d) in edge_plane_distances(coords, &s.edge.flags, &plane) {
            if labels[j] == 0 {
                assert!(d < 1e-9, "same-facet edge point at distance {d}");
            } else {
                let offset = (coords[j][1] - ridge_y).abs();
                let expect = 2.0 * pitch.sin() * offset;
                assert!(facet1.distance(&coords[j]) < 1e-9);
                assert!((d - expect).abs() < 1e-6, "{d} vs {expect}");
            }
        }
    }
}
