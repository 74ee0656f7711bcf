//! Training losses, neighborhood-based adaptive weights and bipartite
//! matching between predicted and ground-truth masks.
//!
//! Functions come in two flavors: plain `f64` evaluations used for matching,
//! reports and tests, and tape builders that carry gradients.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{fit_plane_pca_indexed, EdgeLabels, NeighborTable, PlaneModel, Point3, PointCloud};
use crate::tape::{Real, Tape, Var};

/// Probability clamp used by the probability-domain cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Per-point weights from neighborhood label disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub outliers: Vec<usize>,
    pub neighbors: usize,
    /// Neighbors whose mask label differs, per point.
    pub differing: Vec<usize>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            outliers: Vec::new(),
            neighbors: 0,
            differing: vec![0; n],
        }
    }

    pub fn outlier_count(&self) -> usize {
        self.outliers.len()
    }

    pub fn is_outlier_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.weights.len()];
        for &o in &self.outliers {
            m[o] = true;
        }
        m
    }
}

/// Points whose mask label disagrees with more than half of their
/// `n_nbr` nearest neighbors are outliers; they are weighted by
/// `(N - N_out) / N_out * N_dif / n_nbr`, every other point by 1.
pub fn detect_outliers_weights(cloud: &PointCloud, mask: &[bool], n_nbr: usize) -> Result<WeightVector> {
    if mask.len() != cloud.len() {
        return Err(Error::invalid("mask length differs from point count"));
    }
    let table = NeighborTable::build(cloud.coords(), n_nbr)?;
    Ok(detect_outliers_weights_with_table(&table, mask))
}

pub fn detect_outliers_weights_with_table(table: &NeighborTable, mask: &[bool]) -> WeightVector {
    let n = mask.len();
    let k = table.k();
    let differing: Vec<usize> = (0..n)
        .map(|j| table.neighbors(j).iter().filter(|&&i| mask[i] != mask[j]).count())
        .collect();
    let outliers: Vec<usize> = (0..n).filter(|&j| 2 * differing[j] > k).collect();
    let mut weights = vec![1.0; n];
    if !outliers.is_empty() {
        let n_out = outliers.len() as f64;
        let ratio = (n as f64 - n_out) / n_out;
        for &j in &outliers {
            weights[j] = ratio * (differing[j] as f64 / k as f64);
        }
    }
    WeightVector {
        weights,
        outliers,
        neighbors: k,
        differing,
    }
}

fn check_lengths(a: usize, l: usize, w: usize) -> Result<()> {
    if a != l || a != w {
        return Err(Error::invalid(format!(
            "length mismatch: {a} predictions, {l} labels, {w} weights"
        )));
    }
    if a == 0 {
        return Err(Error::invalid("empty prediction"));
    }
    Ok(())
}

/// `-(1/N) sum w [l log a + (1 - l) log(1 - a)]` with `a` clamped.
pub fn weighted_bce(a: &[f64], l: &[bool], w: &[f64]) -> Result<f64> {
    check_lengths(a.len(), l.len(), w.len())?;
    let mut s = 0.0;
    for j in 0..a.len() {
        let p = a[j].clamp(PROB_EPS, 1.0 - PROB_EPS);
        s += w[j] * if l[j] { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-s / a.len() as f64)
}

/// Same quantity computed from logits, exact in the saturated regime.
pub fn weighted_bce_logits(x: &[f64], l: &[bool], w: &[f64]) -> Result<f64> {
    check_lengths(x.len(), l.len(), w.len())?;
    let s: f64 = (0..x.len())
        .map(|j| w[j] * (softplus(x[j]) - if l[j] { x[j] } else { 0.0 }))
        .sum();
    Ok(s / x.len() as f64)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 - (2 sum w a l + 1) / (sum w (a + l) + 1)`.
pub fn weighted_dice(a: &[f64], l: &[bool], w: &[f64]) -> Result<f64> {
    check_lengths(a.len(), l.len(), w.len())?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for j in 0..a.len() {
        let lj = if l[j] { 1.0 } else { 0.0 };
        inter += w[j] * a[j] * lj;
        total += w[j] * (a[j] + lj);
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

pub fn weighted_mask_loss(a: &[f64], l: &[bool], w: &[f64]) -> Result<f64> {
    Ok(weighted_bce(a, l, w)? + weighted_dice(a, l, w)?)
}

fn row_const<T: Real>(tape: &mut Tape<T>, values: impl Iterator<Item = f64>) -> Var {
    let v: Vec<T> = values.map(T::of).collect();
    let n = v.len();
    tape.constant(Array2::from_shape_vec((1, n), v).expect("row"))
}

fn bool_f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Probability-domain weighted BCE on a `1 x N` row of probabilities.
pub fn weighted_bce_var<T: Real>(tape: &mut Tape<T>, probs: Var, l: &[bool], w: &[f64]) -> Var {
    let n = l.len();
    let p = tape.clamp(probs, T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
    let log_p = tape.log(p);
    let one_minus = tape.neg(p);
    let one_minus = tape.add_scalar(one_minus, T::one());
    let log_q = tape.log(one_minus);
    let wl = row_const(tape, (0..n).map(|j| w[j] * bool_f(l[j])));
    let wnl = row_const(tape, (0..n).map(|j| w[j] * (1.0 - bool_f(l[j]))));
    let a = tape.mul(log_p, wl);
    let b = tape.mul(log_q, wnl);
    let s = tape.add(a, b);
    let s = tape.sum_all(s);
    tape.scale(s, T::of(-1.0 / n as f64))
}

/// Weighted BCE from a `1 x N` row of logits: `mean w (softplus(x) - l x)`.
pub fn weighted_bce_logits_var<T: Real>(tape: &mut Tape<T>, logits: Var, l: &[bool], w: &[f64]) -> Var {
    let n = l.len();
    let sp = tape.softplus(logits);
    let wconst = row_const(tape, w.iter().copied());
    let wl = row_const(tape, (0..n).map(|j| w[j] * bool_f(l[j])));
    let a = tape.mul(sp, wconst);
    let b = tape.mul(logits, wl);
    let d = tape.sub(a, b);
    let s = tape.sum_all(d);
    tape.scale(s, T::of(1.0 / n as f64))
}

/// Weighted Dice on a `1 x N` row of probabilities.
pub fn weighted_dice_var<T: Real>(tape: &mut Tape<T>, probs: Var, l: &[bool], w: &[f64]) -> Var {
    let n = l.len();
    let wl = row_const(tape, (0..n).map(|j| w[j] * bool_f(l[j])));
    let wconst = row_const(tape, w.iter().copied());
    let inter = tape.mul(probs, wl);
    let inter = tape.sum_all(inter);
    let num = tape.scale(inter, T::of(2.0));
    let num = tape.add_scalar(num, T::of(DICE_EPS));
    let wa = tape.mul(probs, wconst);
    let wa = tape.sum_all(wa);
    let wl_sum: f64 = (0..n).map(|j| w[j] * bool_f(l[j])).sum();
    let den = tape.add_scalar(wa, T::of(wl_sum + DICE_EPS));
    let ratio = tape.div(num, den);
    let neg = tape.neg(ratio);
    tape.add_scalar(neg, T::one())
}

/// Plane fitted to a mask and the resulting distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneLoss {
    /// Mean distance over in-mask points.
    pub hard: f64,
    /// Probability-weighted mean distance over all points.
    pub soft: f64,
    pub plane: Option<PlaneModel>,
    /// Distance of every point to the plane (empty when skipped).
    pub distances: Vec<f64>,
    pub skipped: bool,
}

impl PlaneLoss {
    fn skipped() -> Self {
        Self {
            hard: 0.0,
            soft: 0.0,
            plane: None,
            distances: Vec::new(),
            skipped: true,
        }
    }
}

/// Fits a plane to in-mask non-outlier points and measures distances.
/// Fewer than 3 usable points (or a degenerate fit) contribute 0.
pub fn plane_geometric_loss(coords: &[Point3], a: &[f64], mask: &[bool], weights: &WeightVector) -> Result<PlaneLoss> {
    if a.len() != coords.len() || mask.len() != coords.len() {
        return Err(Error::invalid("plane loss inputs differ in length"));
    }
    let outlier = weights.is_outlier_mask();
    let usable: Vec<usize> = (0..coords.len()).filter(|&j| mask[j] && !outlier[j]).collect();
    if usable.len() < 3 {
        return Ok(PlaneLoss::skipped());
    }
    let Ok(plane) = fit_plane_pca_indexed(coords, &usable) else {
        return Ok(PlaneLoss::skipped());
    };
    let distances: Vec<f64> = coords.iter().map(|p| plane.distance(p)).collect();
    let in_mask: Vec<usize> = (0..coords.len()).filter(|&j| mask[j]).collect();
    let hard = in_mask.iter().map(|&j| distances[j]).sum::<f64>() / in_mask.len() as f64;
    let mass: f64 = a.iter().sum();
    let soft = if mass > 0.0 {
        a.iter().zip(&distances).map(|(x, d)| x * d).sum::<f64>() / mass
    } else {
        0.0
    };
    Ok(PlaneLoss {
        hard,
        soft,
        plane: Some(plane),
        distances,
        skipped: false,
    })
}

/// `sum a d / sum a` on a `1 x N` row of probabilities.
pub fn soft_plane_loss_var<T: Real>(tape: &mut Tape<T>, probs: Var, distances: &[f64]) -> Var {
    let d = row_const(tape, distances.iter().copied());
    let ad = tape.mul(probs, d);
    let num = tape.sum_all(ad);
    let mass = tape.sum_all(probs);
    let mass = tape.add_scalar(mass, T::of(1e-12));
    tape.div(num, mass)
}

/// Mask loss plus hard plane loss of the prediction minus its score.
pub fn matching_cost(a: &[f64], gt: &[bool], w: &[f64], hard_plane: f64, score: f64) -> Result<f64> {
    Ok(weighted_mask_loss(a, gt, w)? + hard_plane - score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// `(prediction, ground truth)` pairs ordered by ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl MatchAssignment {
    pub fn matched_predictions(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column chosen for each row.
fn assign_rows(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // potentials and matching are 1-based; index 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn optimal_total(costs: &Array2<f64>, preds: &[usize], gts: &[usize]) -> f64 {
    let table: Vec<Vec<f64>> = gts
        .iter()
        .map(|&g| preds.iter().map(|&p| costs[[p, g]]).collect())
        .collect();
    let cols = assign_rows(&table, preds.len());
    gts.iter().zip(&cols).map(|(&g, &c)| costs[[preds[c], g]]).sum()
}

/// Optimal one-to-one assignment of ground-truth columns to prediction rows
/// of a `K x G` cost matrix. Among optimal assignments the one whose
/// prediction sequence (in ground-truth order) is lexicographically
/// smallest is returned.
pub fn hungarian_match(costs: &Array2<f64>) -> Result<MatchAssignment> {
    let (k, g) = costs.dim();
    if k < g {
        return Err(Error::invalid(format!("{k} predictions cannot cover {g} ground-truth masks")));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite matching cost".into()));
    }
    let all_preds: Vec<usize> = (0..k).collect();
    let all_gts: Vec<usize> = (0..g).collect();
    let best = optimal_total(costs, &all_preds, &all_gts);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut free: Vec<usize> = all_preds;
    let mut pairs = Vec::with_capacity(g);
    let mut committed = 0.0;
    for gt in 0..g {
        let rest_gts: Vec<usize> = (gt + 1..g).collect();
        let mut chosen = None;
        for (pos, &p) in free.iter().enumerate() {
            let remaining: Vec<usize> = free.iter().copied().filter(|&q| q != p).collect();
            let sub = optimal_total(costs, &remaining, &rest_gts);
            if committed + costs[[p, gt]] + sub <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("an optimal completion always exists");
        let p = free.remove(pos);
        committed += costs[[p, gt]];
        pairs.push((p, gt));
    }
    Ok(MatchAssignment { pairs, total: committed })
}

/// Mean probability-domain BCE over all queries; matched ones are positives.
pub fn semantic_class_loss(scores: &[f64], matched: &[usize]) -> Result<f64> {
    let mut labels = vec![false; scores.len()];
    for &m in matched {
        if m >= scores.len() {
            return Err(Error::invalid(format!("matched index {m} out of range")));
        }
        labels[m] = true;
    }
    weighted_bce(scores, &labels, &vec![1.0; scores.len()])
}

/// BCE plus Dice between the edge heatmap and edge labels, weighted by the
/// outlier analysis of the binarized predicted edge mask.
pub fn edge_mask_loss(heatmap: &[f64], gt: &EdgeLabels, table: &NeighborTable) -> Result<f64> {
    let predicted: Vec<bool> = heatmap.iter().map(|&h| h >= 0.5).collect();
    let w = detect_outliers_weights_with_table(table, &predicted);
    weighted_mask_loss(heatmap, &gt.flags, &w.weights)
}

/// Loss components, already averaged over decoder levels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub mask: f64,
    pub plane: f64,
    pub cls: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Averages per-level `(mask, plane, cls)` terms and adds the edge term.
    pub fn combine(levels: &[(f64, f64, f64)], edge: f64) -> Self {
        let n = levels.len().max(1) as f64;
        let mask = levels.iter().map(|l| l.0).sum::<f64>() / n;
        let plane = levels.iter().map(|l| l.1).sum::<f64>() / n;
        let cls = levels.iter().map(|l| l.2).sum::<f64>() / n;
        Self {
            mask,
            plane,
            cls,
            edge,
            total: mask + plane + cls + edge,
        }
    }

    pub fn scaled(self, c: f64) -> Self {
        Self {
            mask: self.mask * c,
            plane: self.plane * c,
            cls: self.cls * c,
            edge: self.edge * c,
            total: self.total * c,
        }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            mask: self.mask + o.mask,
            plane: self.plane + o.plane,
            cls: self.cls + o.cls,
            edge: self.edge + o.edge,
            total: self.total + o.total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(n: usize) -> PointCloud {
        PointCloud::unlabeled((0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn collinear_outlier_example() {
        let mut mask = vec![false; 10];
        for i in [0, 1, 2, 3, 4, 7] {
            mask[i] = true;
        }
        let w = detect_outliers_weights(&line(10), &mask, 4).unwrap();
        assert_eq!(w.outliers, vec![5, 7]);
        assert_eq!(w.weights[7], 4.0);
        assert_eq!(w.weights[5], 3.0);
        for j in [0, 1, 2, 3, 4, 6, 8, 9] {
            assert_eq!(w.weights[j], 1.0);
        }
        let uniform = detect_outliers_weights(&line(10), &[true; 10], 4).unwrap();
        assert!(uniform.outliers.is_empty() && uniform.weights.iter().all(|&x| x == 1.0));
        assert!(detect_outliers_weights(&line(10), &mask, 10).is_err());
    }

    #[test]
    fn closed_form_losses() {
        let a = vec![0.5; 7];
        let l = vec![true, false, true, true, false, false, true];
        let w = vec![1.0; 7];
        assert!((weighted_bce(&a, &l, &w).unwrap() - 2f64.ln()).abs() < 1e-12);
        let e = (-1f64).exp();
        assert!((weighted_bce(&[e], &[true], &[2.0]).unwrap() - 2.0).abs() < 1e-12);
        let bin: Vec<f64> = l.iter().map(|&b| bool_f(b)).collect();
        assert_eq!(weighted_dice(&bin, &l, &w).unwrap(), 0.0);
        assert_eq!(weighted_dice(&[0.0; 3], &[false; 3], &[1.0; 3]).unwrap(), 0.0);
        assert!(weighted_bce(&a, &l[..3], &w).is_err());
        let x = [-3.0, 0.2, 5.0];
        let lx = [true, false, true];
        let probs: Vec<f64> = x.iter().map(|&v| crate::maskhead::sigmoid(v)).collect();
        assert_relative_eq!(
            weighted_bce_logits(&x, &lx, &[1.0, 2.0, 0.5]).unwrap(),
            weighted_bce(&probs, &lx, &[1.0, 2.0, 0.5]).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn tape_losses_match_plain_values_and_gradients() {
        let a0 = vec![0.2, 0.9, 0.55, 0.31, 0.77];
        let l = vec![false, true, true, false, true];
        let w = vec![1.0, 2.5, 1.0, 3.0, 0.5];
        let dist = vec![0.1, 0.0, 0.3, 0.2, 0.05];
        let f = |which: usize, a: &[f64]| -> f64 {
            match which {
                0 => weighted_bce(a, &l, &w).unwrap(),
                1 => weighted_dice(a, &l, &w).unwrap(),
                _ => a.iter().zip(&dist).map(|(x, d)| x * d).sum::<f64>() / (a.iter().sum::<f64>() + 1e-12),
            }
        };
        for which in 0..3 {
            let mut tape = Tape::<f64>::new();
            let p = tape.input(Array2::from_shape_vec((1, 5), a0.clone()).unwrap());
            let out = match which {
                0 => weighted_bce_var(&mut tape, p, &l, &w),
                1 => weighted_dice_var(&mut tape, p, &l, &w),
                _ => soft_plane_loss_var(&mut tape, p, &dist),
            };
            assert!((tape.scalar(out) - f(which, &a0)).abs() < 1e-12);
            let g = tape.backward(out);
            let g = g.wrt(p).unwrap();
            for j in 0..5 {
                let h = 1e-6;
                let mut up = a0.clone();
                up[j] += h;
                let mut dn = a0.clone();
                dn[j] -= h;
                let fd = (f(which, &up) - f(which, &dn)) / (2.0 * h);
                assert_relative_eq!(g[[0, j]], fd, max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn plane_loss_with_excluded_outlier() {
        let mut coords: Vec<Point3> = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                coords.push([x as f64, y as f64, 0.0]);
            }
        }
        coords.push([10.0, 10.0, 1.0]);
        for d in [[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, -0.1, 0.0], [0.0, 0.0, 0.1], [0.0, 0.0, -0.1]] {
            coords.push([10.0 + d[0], 10.0 + d[1], 1.0 + d[2]]);
        }
        let mask: Vec<bool> = (0..coords.len()).map(|j| j < 10).collect();
        let cloud = PointCloud::unlabeled(coords.clone()).unwrap();
        let w = detect_outliers_weights(&cloud, &mask, 4).unwrap();
        assert_eq!(w.outliers, vec![9]);
        let a: Vec<f64> = mask.iter().map(|&m| bool_f(m)).collect();
        let pl = plane_geometric_loss(&coords, &a, &mask, &w).unwrap();
        assert!((pl.hard - 0.1).abs() < 1e-9);
        let flat = plane_geometric_loss(&coords[..9], &[1.0; 9], &[true; 9], &WeightVector::uniform(9)).unwrap();
        assert!(flat.hard.abs() < 1e-12);
        let few = plane_geometric_loss(&coords[..2], &[1.0; 2], &[true; 2], &WeightVector::uniform(2)).unwrap();
        assert!(few.skipped && few.hard == 0.0);
    }

    #[test]
    fn hungarian_examples() {
        let c = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total, 2.0);
        let eq = Array2::from_elem((4, 3), 1.0);
        assert_eq!(hungarian_match(&eq).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let anti = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 5.0 });
        assert_eq!(hungarian_match(&anti).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(hungarian_match(&Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn matching_cost_and_semantic_loss() {
        let gt = [true, false, true];
        let a = [1.0, 0.0, 1.0];
        let c = matching_cost(&a, &gt, &[1.0; 3], 0.0, 1.0).unwrap();
        assert!((c + 1.0).abs() < 1e-6);
        let c2 = matching_cost(&a, &gt, &[1.0; 3], 0.0, 0.75).unwrap();
        assert!((c2 - c - 0.25).abs() < 1e-12);
        assert!((semantic_class_loss(&[0.5; 4], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(semantic_class_loss(&[1.0, 0.0], &[0]).unwrap() < 1e-6);
    }

    #[test]
    fn breakdown_sums() {
        let b = LossBreakdown::combine(&[(0.5, 0.1, 0.2), (0.3, 0.3, 0.0)], 0.7);
        assert!((b.mask + b.plane + b.cls + b.edge - b.total).abs() < 1e-12);
        assert_eq!(LossBreakdown::combine(&[(0.0, 0.0, 0.0)], 0.0).total, 0.0);
    }
}
