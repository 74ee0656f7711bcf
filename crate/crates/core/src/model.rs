//! The full segmentation network: backbone, query decoders and mask head,
//! with the training objective and inference path.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, Hierarchy, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::geom::{NeighborTable, PlaneModel, Point3};
use crate::loss::{
    detect_outliers_weights_with_table, hungarian_match, plane_geometric_loss, soft_plane_loss_var,
    weighted_bce_logits, weighted_bce_logits_var, weighted_dice, weighted_dice_var, weighted_mask_loss, LossBreakdown,
    WeightVector,
};
use crate::maskhead::{merge_masks, sigmoid, MaskHead, MaskHeadConfig, MaskSet, SegmentationResult};
use crate::nn::{Ctx, Init};
use crate::params::ParamStore;
use crate::querydec::{DecoderConfig, DecoderStack, PlaneQuerySet};
use crate::tape::{Real, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub head: MaskHeadConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            head: MaskHeadConfig::default(),
            init_seed: 0,
        }
    }
}

pub struct RoofSegModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub decoder: DecoderStack,
    pub head: MaskHead,
}

/// Predictions attached to one decoder output.
pub struct LevelOutput {
    pub queries: Var,
    /// `K x N` logits.
    pub affinity: Var,
    /// `K x 1` logits.
    pub semantic: Var,
}

pub struct ForwardOutput {
    pub features: MultiScaleFeatures,
    pub queries: PlaneQuerySet,
    pub levels: Vec<LevelOutput>,
    /// `N x 1` logits.
    pub edge: Var,
}

/// Which loss terms and modules are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub eamm: bool,
    pub adaptive_weights: bool,
    pub plane_loss: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            eamm: true,
            adaptive_weights: true,
            plane_loss: true,
        }
    }
}

/// Ground truth prepared for the objective.
pub struct TrainingTarget {
    pub masks: Vec<Vec<bool>>,
    pub edge: Vec<bool>,
    pub neighbors: NeighborTable,
}

impl TrainingTarget {
    pub fn new(coords: &[Point3], labels: &[usize], edge: &[bool], n_knn: usize) -> Result<Self> {
        if labels.len() != coords.len() || edge.len() != coords.len() {
            return Err(Error::invalid("target lengths differ from point count"));
        }
        let g = labels.iter().copied().max().map_or(0, |m| m + 1);
        let masks = (0..g).map(|k| labels.iter().map(|&l| l == k).collect()).collect();
        Ok(Self {
            masks,
            edge: edge.to_vec(),
            neighbors: NeighborTable::build(coords, n_knn.min(coords.len() - 1))?,
        })
    }
}

/// Per-sample bookkeeping of the objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectiveReport {
    pub breakdown: LossBreakdown,
    /// Matched prediction per ground-truth mask at the last decoder.
    pub final_matches: Vec<usize>,
    pub refinements: usize,
    pub refinement_skips: usize,
    pub plane_skips: usize,
}

/// Non-differentiable choices of the objective for one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decisions {
    pub edge_mask: Vec<bool>,
    pub edge_weights: Vec<f64>,
    pub levels: Vec<LevelDecisions>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelDecisions {
    pub pairs: Vec<MatchDecision>,
}

/// One matched (query, ground truth) pair with its loss weights and plane
/// distances, and the refinement plane when the mask was refined.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDecision {
    pub query: usize,
    pub target: usize,
    pub weights: Vec<f64>,
    pub distances: Option<Vec<f64>>,
    pub refinement_plane: Option<PlaneModel>,
}

fn row_values<T: Real>(ctx: &Ctx<'_, T>, v: Var) -> Vec<f64> {
    ctx.value(v).iter().map(|x| x.as_f64()).collect()
}

fn to_f64<T: Real>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|x| x.as_f64())
}

impl RoofSegModel {
    /// Creates the network and registers freshly initialized parameters.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { store, rng: &mut rng };
        let backbone = Backbone::new(&mut init, config.backbone.clone());
        let decoder = DecoderStack::new(&mut init, config.decoder.clone())?;
        let head = MaskHead::new(&mut init, config.head.clone());
        Ok(Self {
            config,
            backbone,
            decoder,
            head,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, coords: &[Point3]) -> Result<ForwardOutput> {
        let hierarchy = Hierarchy::build(coords, &self.backbone.config)?;
        self.forward_with(ctx, coords, &hierarchy)
    }

    pub fn forward_with<T: Real>(&self, ctx: &mut Ctx<'_, T>, coords: &[Point3], hierarchy: &Hierarchy) -> Result<ForwardOutput> {
        let features = self.backbone.forward(ctx, hierarchy)?;
        let queries = self.decoder.generate(ctx, coords)?;
        let refined = self.decoder.refine_queries(ctx, &queries, &features)?;
        let f1 = features.full();
        let mut levels = Vec::with_capacity(refined.states.len());
        for &q in &refined.states {
            let affinity = self.head.compute_affinity(ctx, q, f1)?;
            let semantic = self.head.semantic_logits(ctx, q);
            levels.push(LevelOutput {
                queries: q,
                affinity,
                semantic,
            });
        }
        let edge = self.head.edge_logits(ctx, f1);
        Ok(ForwardOutput {
            features,
            queries,
            levels,
            edge,
        })
    }

    fn weights_for(&self, target: &TrainingTarget, mask: &[bool], opts: &LossOptions) -> WeightVector {
        if opts.adaptive_weights {
            detect_outliers_weights_with_table(&target.neighbors, mask)
        } else {
            WeightVector::uniform(mask.len())
        }
    }

    /// Differentiable total loss for one sample, with its breakdown.
    pub fn objective<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        coords: &[Point3],
        hierarchy: &Hierarchy,
        target: &TrainingTarget,
        opts: &LossOptions,
    ) -> Result<(Var, ObjectiveReport)> {
        let (loss, report, _) = self.objective_with(ctx, coords, hierarchy, target, opts, None)?;
        Ok((loss, report))
    }

    /// Like [`objective`](Self::objective), also returning the discrete
    /// choices it made. With `frozen`, those choices are reused instead of
    /// being derived from the current predictions, which makes the loss a
    /// smooth function of the parameters around the point they came from.
    pub fn objective_with<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        coords: &[Point3],
        hierarchy: &Hierarchy,
        target: &TrainingTarget,
        opts: &LossOptions,
        frozen: Option<&Decisions>,
    ) -> Result<(Var, ObjectiveReport, Decisions)> {
        let out = self.forward_with(ctx, coords, hierarchy)?;
        let g = target.masks.len();
        let k = self.config.decoder.queries;
        if g == 0 {
            return Err(Error::invalid("sample has no ground-truth planes"));
        }
        if g > k {
            return Err(Error::invalid(format!("{g} ground-truth planes exceed {k} queries")));
        }
        if let Some(f) = frozen {
            if f.levels.len() != out.levels.len() || f.edge_mask.len() != coords.len() {
                return Err(Error::invalid("frozen decisions do not fit this sample"));
            }
        }
        let mut report = ObjectiveReport::default();
        let mut decisions = Decisions::default();

        // edge term, once
        let edge_row = ctx.tape.transpose(out.edge);
        let (edge_pred, edge_w) = match frozen {
            Some(f) => (f.edge_mask.clone(), f.edge_weights.clone()),
            None => {
                let pred: Vec<bool> = row_values(ctx, edge_row).iter().map(|&x| x >= 0.0).collect();
                let w = self.weights_for(target, &pred, opts).weights;
                (pred, w)
            }
        };
        let edge_bce = weighted_bce_logits_var(&mut ctx.tape, edge_row, &target.edge, &edge_w);
        let edge_prob = ctx.tape.sigmoid(edge_row);
        let edge_dice = weighted_dice_var(&mut ctx.tape, edge_prob, &target.edge, &edge_w);
        let edge_loss = ctx.tape.add(edge_bce, edge_dice);
        let edge_value = ctx.tape.scalar(edge_loss).as_f64();
        decisions.edge_mask = edge_pred.clone();
        decisions.edge_weights = edge_w;

        let last = out.levels.len() - 1;
        let mut level_terms = Vec::with_capacity(out.levels.len());
        let mut level_vars = Vec::with_capacity(out.levels.len());
        for (d, level) in out.levels.iter().enumerate() {
            let (chosen, cached) = match frozen {
                Some(f) => (f.levels[d].clone(), vec![None; f.levels[d].pairs.len()]),
                None => self.decide_level(ctx, coords, target, opts, level, d == last, &edge_pred, &out)?,
            };
            let mut mask_terms = Vec::with_capacity(g);
            let mut plane_terms = Vec::with_capacity(g);
            let (mut mask_sum, mut plane_sum) = (0.0, 0.0);
            for (pair, cached) in chosen.pairs.iter().zip(cached) {
                let gt = &target.masks[pair.target];
                let mut row = ctx.tape.gather_rows(level.affinity, &[pair.query]);
                if d == last && opts.eamm {
                    report.refinements += 1;
                    match (&pair.refinement_plane, cached) {
                        (Some(_), Some(refined)) => row = refined,
                        (Some(plane), None) => {
                            let query = ctx.tape.gather_rows(level.queries, &[pair.query]);
                            row = self.head.refine_with_plane(ctx, query, out.features.full(), coords, &edge_pred, plane);
                        }
                        (None, _) => report.refinement_skips += 1,
                    }
                }
                let bce = weighted_bce_logits_var(&mut ctx.tape, row, gt, &pair.weights);
                let prob = ctx.tape.sigmoid(row);
                let dice = weighted_dice_var(&mut ctx.tape, prob, gt, &pair.weights);
                let m = ctx.tape.add(bce, dice);
                mask_sum += ctx.tape.scalar(m).as_f64();
                mask_terms.push(m);
                if opts.plane_loss {
                    match &pair.distances {
                        Some(dist) => {
                            let p = soft_plane_loss_var(&mut ctx.tape, prob, dist);
                            plane_sum += ctx.tape.scalar(p).as_f64();
                            plane_terms.push(p);
                        }
                        None => report.plane_skips += 1,
                    }
                }
            }
            let pairs = chosen.pairs.len() as f64;
            let mut labels = vec![false; k];
            for pair in &chosen.pairs {
                labels[pair.query] = true;
            }
            let sem_row = ctx.tape.transpose(level.semantic);
            let cls = weighted_bce_logits_var(&mut ctx.tape, sem_row, &labels, &vec![1.0; k]);
            let cls_value = ctx.tape.scalar(cls).as_f64();

            let mut parts = mask_terms;
            parts.extend(plane_terms);
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = ctx.tape.add(acc, p);
            }
            let acc = ctx.tape.scale(acc, T::of(1.0 / pairs));
            let level_total = ctx.tape.add(acc, cls);
            level_vars.push(level_total);
            level_terms.push((mask_sum / pairs, plane_sum / pairs, cls_value));
            if d == last {
                report.final_matches = chosen.pairs.iter().map(|p| p.query).collect();
            }
            decisions.levels.push(chosen);
        }
        let mut total = level_vars[0];
        for &v in &level_vars[1..] {
            total = ctx.tape.add(total, v);
        }
        let total = ctx.tape.scale(total, T::of(1.0 / level_vars.len() as f64));
        let total = ctx.tape.add(total, edge_loss);
        report.breakdown = LossBreakdown::combine(&level_terms, edge_value);
        Ok((total, report, decisions))
    }

    /// Binary masks, outlier weights, planes and the matching of one level.
    #[allow(clippy::too_many_arguments)]
    fn decide_level<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        coords: &[Point3],
        target: &TrainingTarget,
        opts: &LossOptions,
        level: &LevelOutput,
        refine: bool,
        edge_pred: &[bool],
        out: &ForwardOutput,
    ) -> Result<(LevelDecisions, Vec<Option<Var>>)> {
        let k = self.config.decoder.queries;
        let logits = to_f64(ctx.value(level.affinity));
        let sem = row_values(ctx, level.semantic);
        let probs = logits.mapv(sigmoid);
        let masks: Vec<Vec<bool>> = logits.rows().into_iter().map(|r| r.iter().map(|&x| x >= 0.0).collect()).collect();
        let weights: Vec<WeightVector> = masks.iter().map(|m| self.weights_for(target, m, opts)).collect();
        let planes = (0..k)
            .map(|i| plane_geometric_loss(coords, probs.row(i).as_slice().unwrap(), &masks[i], &weights[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut costs = Array2::zeros((k, target.masks.len()));
        for i in 0..k {
            let a = probs.row(i);
            let a = a.as_slice().unwrap();
            let score = sigmoid(sem[i]);
            let hard = if opts.plane_loss { planes[i].hard } else { 0.0 };
            for (gi, gt) in target.masks.iter().enumerate() {
                costs[[i, gi]] = weighted_mask_loss(a, gt, &weights[i].weights)? + hard - score;
            }
        }
        let assignment = hungarian_match(&costs)?;
        let mut pairs = Vec::with_capacity(assignment.pairs.len());
        let mut refined_rows = Vec::with_capacity(assignment.pairs.len());
        for &(i, gi) in &assignment.pairs {
            let mut chosen = MatchDecision {
                query: i,
                target: gi,
                weights: weights[i].weights.clone(),
                distances: (!planes[i].skipped).then(|| planes[i].distances.clone()),
                refinement_plane: None,
            };
            let mut refined_row = None;
            if refine && opts.eamm {
                let row = ctx.tape.gather_rows(level.affinity, &[i]);
                let query = ctx.tape.gather_rows(level.queries, &[i]);
                let r = self.head.eamm_refine(ctx, row, &masks[i], edge_pred, out.features.full(), query, coords);
                if !r.skipped {
                    let refined = row_values(ctx, r.logits);
                    let m: Vec<bool> = refined.iter().map(|&x| x >= 0.0).collect();
                    let p: Vec<f64> = refined.iter().map(|&x| sigmoid(x)).collect();
                    let w = self.weights_for(target, &m, opts);
                    let plane = plane_geometric_loss(coords, &p, &m, &w)?;
                    chosen.weights = w.weights;
                    chosen.distances = (!plane.skipped).then_some(plane.distances);
                    chosen.refinement_plane = r.plane;
                    refined_row = Some(r.logits);
                }
            }
            pairs.push(chosen);
            refined_rows.push(refined_row);
        }
        Ok((LevelDecisions { pairs }, refined_rows))
    }

    /// Inference: masks of the final decoder, refined for positive queries
    /// when `eamm` is set, then merged into per-point labels.
    pub fn predict<T: Real>(&self, ctx: &mut Ctx<'_, T>, coords: &[Point3], eamm: bool) -> Result<Prediction> {
        let out = self.forward(ctx, coords)?;
        let last = out.levels.last().expect("decoders");
        let mut affinity = to_f64(ctx.value(last.affinity));
        let sem = row_values(ctx, last.semantic);
        let edge = row_values(ctx, out.edge);
        let base = MaskSet::from_logits(affinity.clone(), &sem, &edge);
        let mut skipped = vec![false; base.queries()];
        let mut refined = vec![false; base.queries()];
        if eamm {
            let positive: Vec<usize> = (0..base.queries()).filter(|&i| base.scores[i] >= 0.5).collect();
            for i in positive {
                let row = ctx.tape.gather_rows(last.affinity, &[i]);
                let query = ctx.tape.gather_rows(last.queries, &[i]);
                let r = self
                    .head
                    .eamm_refine(ctx, row, &base.masks[i], &base.edge_mask, out.features.full(), query, coords);
                if r.skipped {
                    skipped[i] = true;
                } else {
                    refined[i] = true;
                    let v = row_values(ctx, r.logits);
                    for (j, x) in v.into_iter().enumerate() {
                        affinity[[i, j]] = x;
                    }
                }
            }
        }
        let masks = MaskSet::from_logits(affinity, &sem, &edge);
        let segmentation = merge_masks(&masks.probabilities, &masks.scores)?;
        Ok(Prediction {
            masks,
            segmentation,
            refined,
            skipped,
            query_point_products: ctx.query_point_products,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub masks: MaskSet,
    pub segmentation: SegmentationResult,
    pub refined: Vec<bool>,
    pub skipped: Vec<bool>,
    pub query_point_products: u64,
}

/// Plain value of the objective's mask term for one prediction row, used by
/// tests to cross-check the tape.
pub fn mask_loss_from_logits(logits: &[f64], gt: &[bool], w: &[f64]) -> Result<f64> {
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    Ok(weighted_bce_logits(logits, gt, w)? + weighted_dice(&p, gt, w)?)
}
