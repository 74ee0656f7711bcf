//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use roofseg::geom::{dist2, Point3};

/// Per-point differing-neighbor counts, outlier set and weights computed
/// from the full distance matrix.
pub fn outlier_oracle(coords: &[Point3], mask: &[bool], k: usize) -> (Vec<usize>, Vec<f64>) {
    let n = coords.len();
    let mut dif = vec![0usize; n];
    for j in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&i| i != j).map(|i| (dist2(&coords[j], &coords[i]), i)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dif[j] = d[..k].iter().filter(|&&(_, i)| mask[i] != mask[j]).count();
    }
    let outliers: Vec<usize> = (0..n).filter(|&j| dif[j] as f64 > k as f64 / 2.0).collect();
    let n_out = outliers.len();
    let mut w = vec![1.0; n];
    for &j in &outliers {
        w[j] = ((n - n_out) as f64 / n_out as f64) * (dif[j] as f64 / k as f64);
    }
    (outliers, w)
}

fn permutations(pool: &[usize], take: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == take {
        out.push(prefix.clone());
        return;
    }
    for &p in pool {
        if !prefix.contains(&p) {
            prefix.push(p);
            permutations(pool, take, prefix, out);
            prefix.pop();
        }
    }
}

/// Minimum-cost injective assignment of `g` columns to `k` rows; among
/// optima, the row sequence in column order that is lexicographically
/// smallest. Returns that sequence and the cost.
pub fn assignment_oracle(costs: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let k = costs.len();
    let g = costs[0].len();
    let mut all = Vec::new();
    permutations(&(0..k).collect::<Vec<_>>(), g, &mut Vec::new(), &mut all);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for rows in all {
        let c: f64 = rows.iter().enumerate().map(|(col, &r)| costs[r][col]).sum();
        let better = match &best {
            None => true,
            Some((b, bc)) => c < *bc - 1e-9 * (1.0 + bc.abs()) || ((c - bc).abs() <= 1e-9 * (1.0 + bc.abs()) && rows < *b),
        };
        if better {
            best = Some((rows, c));
        }
    }
    best.unwrap()
}

/// Metric definitions evaluated literally over label sets.
pub fn metrics_oracle(pred: &[i64], gt: &[i64], thr: f64) -> [f64; 4] {
    let mut gl: Vec<i64> = gt.iter().copied().filter(|&l| l >= 0).collect();
    gl.sort_unstable();
    gl.dedup();
    let mut pl: Vec<i64> = pred.iter().copied().filter(|&l| l >= 0).collect();
    pl.sort_unstable();
    pl.dedup();
    let iou = |g: i64, p: i64| {
        let inter = (0..gt.len()).filter(|&j| gt[j] == g && pred[j] == p).count();
        let union = (0..gt.len()).filter(|&j| gt[j] == g || pred[j] == p).count();
        inter as f64 / union as f64
    };
    let total = gt.iter().filter(|&&l| l >= 0).count() as f64;
    let mut cov = 0.0;
    let mut wcov = 0.0;
    for &g in &gl {
        let best = pl.iter().map(|&p| iou(g, p)).fold(0.0, f64::max);
        cov += best / gl.len() as f64;
        wcov += gt.iter().filter(|&&l| l == g).count() as f64 / total * best;
    }
    let mut used = vec![false; pl.len()];
    let mut matched = 0;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, &g) in gl.iter().enumerate() {
        for (pi, &p) in pl.iter().enumerate() {
            let v = iou(g, p);
            if v >= thr && v > 0.0 {
                pairs.push((v, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gused = vec![false; gl.len()];
    for (_, gi, pi) in pairs {
        if !gused[gi] && !used[pi] {
            gused[gi] = true;
            used[pi] = true;
            matched += 1;
        }
    }
    let prec = if pl.is_empty() { 0.0 } else { matched as f64 / pl.len() as f64 };
    [cov, wcov, prec, matched as f64 / gl.len() as f64]
}
