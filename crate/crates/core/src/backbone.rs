//! Hierarchical point feature extraction: four set-abstraction levels that
//! downsample by 4, then four attention feature-propagation levels that bring
//! 256-wide features back to every scale.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{dist2, farthest_point_sample_in, Point3};
use crate::nn::{Ctx, Init, Mlp, SelfAttention};
use crate::tape::{Real, Var};

pub const FEATURE_WIDTH: usize = 256;
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Two grouping radii per abstraction level.
    pub radii: [[f64; 2]; LEVELS],
    /// Neighbors gathered per radius group.
    pub group_sizes: [usize; 2],
    /// Hidden widths of the grouping MLP per level and group.
    pub group_widths: [usize; LEVELS],
    pub attention_inner: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            radii: [[0.05, 0.1], [0.1, 0.2], [0.2, 0.4], [0.4, 0.8]],
            group_sizes: [16, 32],
            group_widths: [32, 64, 128, 128],
            attention_inner: 64,
            dropout: 0.3,
        }
    }
}

impl BackboneConfig {
    /// Width of each abstraction level's output (both groups concatenated).
    pub fn level_widths(&self) -> [usize; LEVELS] {
        self.group_widths.map(|w| 2 * w)
    }
}

/// Neighborhoods of one radius group: `centers * size` point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub size: usize,
    pub radius: f64,
    pub members: Vec<usize>,
}

/// Sampling and grouping of one abstraction level, expressed in indices of
/// that level's input points.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionPlan {
    pub centers: Vec<usize>,
    pub groups: [Grouping; 2],
}

/// Inverse-distance interpolation from a coarse set onto a fine set as
/// `(fine row, coarse row, weight)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub fine: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

/// Parameter-free structure of the hierarchy for one cloud: it depends only
/// on coordinates and can be reused across forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    /// `coords[0]` is the input; `coords[l]` the output of abstraction `l`.
    pub coords: Vec<Vec<Point3>>,
    /// Indices into the input cloud for every entry of `coords`.
    pub source: Vec<Vec<usize>>,
    pub plans: Vec<AbstractionPlan>,
    /// `interps[l]` maps `coords[l + 1]` onto `coords[l]`.
    pub interps: Vec<Interpolation>,
}

/// Nearest points within `radius` of `center`, ordered by distance then
/// index, padded by cycling when fewer than `size` are found.
pub fn ball_query(coords: &[Point3], center: &Point3, radius: f64, size: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut found: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d = dist2(p, center);
            (d <= r2).then_some((d, i))
        })
        .collect();
    if found.is_empty() {
        // the center belongs to `coords`, so this only happens for foreign
        // centers; fall back to the nearest point
        let nearest = coords
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(p, center), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("nonempty coords");
        found.push(nearest);
    }
    if found.len() > size {
        found.select_nth_unstable_by(size - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(size);
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (0..size).map(|s| found[s % found.len()].1).collect()
}

/// Samples `ceil(n / 4)` centers by farthest-point sampling from the first
/// point and groups neighbors at both radii.
pub fn plan_abstraction(coords: &[Point3], radii: [f64; 2], sizes: [usize; 2]) -> Result<AbstractionPlan> {
    if coords.is_empty() {
        return Err(Error::invalid("set abstraction needs at least one input point"));
    }
    let m = coords.len().div_ceil(4);
    let centers = farthest_point_sample_in(coords, m, 0)?;
    let group = |g: usize| {
        let mut members = Vec::with_capacity(m * sizes[g]);
        for &c in &centers {
            members.extend(ball_query(coords, &coords[c], radii[g], sizes[g]));
        }
        Grouping {
            size: sizes[g],
            radius: radii[g],
            members,
        }
    };
    Ok(AbstractionPlan {
        groups: [group(0), group(1)],
        centers,
    })
}

/// Weights over the 3 nearest coarse points by inverse distance. A coarse
/// point coinciding with the fine point takes all the weight.
pub fn plan_interpolation(fine: &[Point3], coarse: &[Point3]) -> Result<Interpolation> {
    if coarse.is_empty() || fine.is_empty() {
        return Err(Error::invalid("interpolation needs nonempty point sets"));
    }
    let k = coarse.len().min(3);
    let mut entries = Vec::with_capacity(fine.len() * k);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(coarse.len());
    for (i, p) in fine.iter().enumerate() {
        dists.clear();
        dists.extend(coarse.iter().enumerate().map(|(j, c)| (dist2(p, c), j)));
        if dists.len() > k {
            dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let near = &mut dists[..k];
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if near[0].0 == 0.0 {
            entries.push((i, near[0].1, 1.0));
            continue;
        }
        let inv: Vec<f64> = near.iter().map(|(d, _)| 1.0 / d.sqrt()).collect();
        let total: f64 = inv.iter().sum();
        for ((_, j), w) in near.iter().zip(inv) {
            entries.push((i, *j, w / total));
        }
    }
    Ok(Interpolation {
        fine: fine.len(),
        entries,
    })
}

impl Hierarchy {
    pub fn build(coords: &[Point3], config: &BackboneConfig) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("empty point cloud"));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        let mut levels = vec![coords.to_vec()];
        let mut source = vec![(0..coords.len()).collect::<Vec<_>>()];
        let mut plans = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let plan = plan_abstraction(&levels[l], config.radii[l], config.group_sizes)?;
            levels.push(plan.centers.iter().map(|&c| levels[l][c]).collect());
            source.push(plan.centers.iter().map(|&c| source[l][c]).collect());
            plans.push(plan);
        }
        let interps = (0..LEVELS)
            .map(|l| plan_interpolation(&levels[l], &levels[l + 1]))
            .collect::<Result<_>>()?;
        Ok(Self {
            coords: levels,
            source,
            plans,
            interps,
        })
    }

    pub fn len(&self) -> usize {
        self.coords[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords[0].is_empty()
    }
}

/// Coordinates and features of one output scale.
pub struct FeatureLevel {
    pub coords: Vec<Point3>,
    /// Indices into the input cloud.
    pub source: Vec<usize>,
    pub features: Var,
}

/// Output scales, finest first: level 0 holds every input point.
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
}

impl MultiScaleFeatures {
    pub fn full(&self) -> Var {
        self.levels[0].features
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.coords.len()).collect()
    }
}

pub struct AbstractionLayer {
    pub groups: [Mlp; 2],
}

pub struct PropagationLayer {
    pub mlp: Mlp,
    pub attention: SelfAttention,
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub abstraction: Vec<AbstractionLayer>,
    /// `propagation[l]` produces output level `l`.
    pub propagation: Vec<PropagationLayer>,
}

pub fn points_to_array<T: Real>(coords: &[Point3]) -> Array2<T> {
    Array2::from_shape_fn((coords.len(), 3), |(i, c)| T::of(coords[i][c]))
}

impl Backbone {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: BackboneConfig) -> Self {
        let widths = config.level_widths();
        let mut in_width = 3;
        let mut abstraction = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let h = config.group_widths[l];
            let groups = [0, 1].map(|g| init.point_mlp(&format!("backbone.sa{l}.g{g}"), &[3 + in_width, h, h]));
            abstraction.push(AbstractionLayer { groups });
            in_width = widths[l];
        }
        let mut propagation = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let coarse = if l == LEVELS - 1 { widths[LEVELS - 1] } else { FEATURE_WIDTH };
            let skip = if l == 0 { 3 } else { widths[l - 1] };
            let name = format!("backbone.fp{l}");
            propagation.push(PropagationLayer {
                mlp: init.point_mlp(&format!("{name}.mlp"), &[coarse + skip, FEATURE_WIDTH, FEATURE_WIDTH]),
                attention: SelfAttention::new(
                    init,
                    &format!("{name}.attn"),
                    FEATURE_WIDTH,
                    config.attention_inner,
                    config.dropout,
                ),
            });
        }
        Self {
            config,
            abstraction,
            propagation,
        }
    }

    /// One abstraction level: group, transform, max-pool, concatenate.
    pub fn set_abstraction<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        level: usize,
        coords: &[Point3],
        features: Var,
        plan: &AbstractionPlan,
    ) -> Var {
        let layer = &self.abstraction[level];
        let mut pooled = Vec::with_capacity(2);
        for (g, grouping) in plan.groups.iter().enumerate() {
            let rel = Array2::from_shape_fn((grouping.members.len(), 3), |(r, c)| {
                let center = coords[plan.centers[r / grouping.size]];
                T::of((coords[grouping.members[r]][c] - center[c]) / grouping.radius)
            });
            let rel = ctx.tape.constant(rel);
            let gathered = ctx.tape.gather_rows(features, &grouping.members);
            let x = ctx.tape.concat_cols(&[rel, gathered]);
            let h = layer.groups[g].forward(ctx, x);
            pooled.push(ctx.tape.group_max(h, grouping.size));
        }
        ctx.tape.concat_cols(&pooled)
    }

    /// Interpolates coarse features onto the fine set, appends the skip
    /// features and applies the point-wise MLP and self-attention.
    pub fn feature_propagation<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        level: usize,
        coarse: Var,
        skip: Var,
        interp: &Interpolation,
    ) -> Result<Var> {
        let (skip_rows, _) = ctx.tape.shape(skip);
        if skip_rows != interp.fine {
            return Err(Error::invalid(format!(
                "propagation level {level}: skip has {skip_rows} rows, interpolation expects {}",
                interp.fine
            )));
        }
        let layer = &self.propagation[level];
        let entries = interp.entries.iter().map(|&(o, i, w)| (o, i, T::of(w))).collect();
        let up = ctx.tape.row_mix(coarse, interp.fine, entries);
        let x = ctx.tape.concat_cols(&[up, skip]);
        let h = layer.mlp.forward(ctx, x);
        Ok(layer.attention.forward(ctx, h))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, hierarchy: &Hierarchy) -> Result<MultiScaleFeatures> {
        let input = ctx.tape.constant(points_to_array(&hierarchy.coords[0]));
        let mut abstracted = vec![input];
        for l in 0..LEVELS {
            let f = self.set_abstraction(ctx, l, &hierarchy.coords[l], abstracted[l], &hierarchy.plans[l]);
            abstracted.push(f);
        }
        let mut levels: Vec<Option<FeatureLevel>> = (0..LEVELS).map(|_| None).collect();
        let mut coarse = abstracted[LEVELS];
        for l in (0..LEVELS).rev() {
            let f = self.feature_propagation(ctx, l, coarse, abstracted[l], &hierarchy.interps[l])?;
            levels[l] = Some(FeatureLevel {
                coords: hierarchy.coords[l].clone(),
                source: hierarchy.source[l].clone(),
                features: f,
            });
            coarse = f;
        }
        Ok(MultiScaleFeatures {
            levels: levels.into_iter().map(|l| l.expect("filled")).collect(),
        })
    }

    /// Builds the hierarchy and runs the forward pass.
    pub fn extract_features<T: Real>(&self, ctx: &mut Ctx<'_, T>, coords: &[Point3]) -> Result<MultiScaleFeatures> {
        let h = Hierarchy::build(coords, &self.config)?;
        self.forward(ctx, &h)
    }
}
