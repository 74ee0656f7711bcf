//! Plane queries seeded by farthest-point sampling with Fourier position
//! encodings, refined by a stack of cross-attention decoders.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{points_to_array, MultiScaleFeatures, FEATURE_WIDTH, LEVELS};
use crate::error::{Error, Result};
use crate::geom::{farthest_point_sample_in, Point3};
use crate::nn::{Ctx, Init, LayerNorm, Linear, SelfAttention};
use crate::params::ParamId;
use crate::tape::{Real, Var};

pub const FOURIER_FREQUENCIES: usize = FEATURE_WIDTH / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub queries: usize,
    pub decoders: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Every decoder attends the full-resolution features.
    pub full_resolution: bool,
    /// Add the query position encoding again before every decoder.
    pub reinject_position: bool,
    pub fourier_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            decoders: 8,
            ffn_hidden: 1024,
            dropout: 0.3,
            full_resolution: false,
            reinject_position: true,
            fourier_seed: 0x0f0u64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoders == 0 || self.decoders % LEVELS != 0 {
            return Err(Error::invalid(format!(
                "decoder count must be a positive multiple of {LEVELS}, got {}",
                self.decoders
            )));
        }
        if self.queries == 0 {
            return Err(Error::invalid("query count must be positive"));
        }
        Ok(())
    }

    /// Feature level (0 = full resolution) attended by each decoder:
    /// coarsest to finest, cycled.
    pub fn schedule(&self) -> Vec<usize> {
        (0..self.decoders)
            .map(|d| if self.full_resolution { 0 } else { LEVELS - 1 - d % LEVELS })
            .collect()
    }
}

/// Fixed Gaussian frequency matrix, `3 x 128`.
pub fn fourier_matrix(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((3, FOURIER_FREQUENCIES), |_| StandardNormal.sample(&mut rng))
}

/// `[sin(2 pi x B), cos(2 pi x B)]` per row.
pub fn fourier_encode(coords: &[Point3], freqs: &Array2<f64>) -> Array2<f64> {
    let f = freqs.ncols();
    let mut out = Array2::zeros((coords.len(), 2 * f));
    for (i, p) in coords.iter().enumerate() {
        for j in 0..f {
            let t = 2.0 * PI * (p[0] * freqs[[0, j]] + p[1] * freqs[[1, j]] + p[2] * freqs[[2, j]]);
            out[[i, j]] = t.sin();
            out[[i, f + j]] = t.cos();
        }
    }
    out
}

/// Initial queries: sampled point indices and their encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneQuerySet {
    pub indices: Vec<usize>,
    pub embeddings: Array2<f64>,
}

pub fn generate_queries(coords: &[Point3], k: usize, freqs: &Array2<f64>) -> Result<PlaneQuerySet> {
    if k > coords.len() {
        return Err(Error::invalid(format!("{k} queries requested from {} points", coords.len())));
    }
    let indices = farthest_point_sample_in(coords, k, 0)?;
    let picked: Vec<Point3> = indices.iter().map(|&i| coords[i]).collect();
    Ok(PlaneQuerySet {
        embeddings: fourier_encode(&picked, freqs),
        indices,
    })
}

/// Cross-attention from queries to point features. Keys carry no bias
/// since a per-query constant cancels in the softmax.
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl CrossAttention {
    /// Returns `(attended values, attention weights)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, q: Var, points: Var) -> (Var, Var) {
        let qp = self.query.forward(ctx, q);
        let wk = ctx.param(self.key.weight);
        // (q Wq) Wk^T F^T == (q Wq)(F Wk)^T without forming F Wk
        let qk = ctx.tape.matmul_nt(qp, wk, T::one());
        let scale = T::of(1.0 / (FEATURE_WIDTH as f64).sqrt());
        let logits = ctx.tape.matmul_nt(qk, points, scale);
        let weights = ctx.tape.softmax_rows(logits);
        let (k, _) = ctx.tape.shape(q);
        let (n, _) = ctx.tape.shape(points);
        ctx.query_point_products += (k * n) as u64;
        let mixed = ctx.tape.matmul(weights, points);
        (self.value.forward(ctx, mixed), weights)
    }
}

pub struct DecoderBlock {
    pub cross: CrossAttention,
    pub merge: Linear,
    pub merge_norm: LayerNorm,
    pub self_attention: SelfAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

pub struct DecoderStack {
    pub config: DecoderConfig,
    pub fourier: ParamId,
    pub blocks: Vec<DecoderBlock>,
}

/// Query states after every decoder, last one final.
pub struct RefinedQueries {
    pub states: Vec<Var>,
    pub attention: Vec<Var>,
}

impl RefinedQueries {
    pub fn last(&self) -> Var {
        *self.states.last().expect("at least one decoder")
    }
}

impl DecoderStack {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let w = FEATURE_WIDTH;
        let fourier = init
            .store
            .add("decoder.fourier", fourier_matrix(config.fourier_seed).mapv(T::of), false);
        let blocks = (0..config.decoders)
            .map(|d| {
                let name = format!("decoder.{d}");
                DecoderBlock {
                    cross: CrossAttention {
                        query: init.linear(&format!("{name}.cross.q"), w, w, true),
                        key: init.linear(&format!("{name}.cross.k"), w, w, false),
                        value: init.linear(&format!("{name}.cross.v"), w, w, true),
                    },
                    merge: init.linear(&format!("{name}.merge"), 2 * w, w, true),
                    merge_norm: init.layer_norm(&format!("{name}.merge_norm"), w),
                    self_attention: SelfAttention::new(init, &format!("{name}.self"), w, w, config.dropout),
                    ffn_in: init.linear(&format!("{name}.ffn.0"), w, config.ffn_hidden, true),
                    ffn_out: init.linear(&format!("{name}.ffn.1"), config.ffn_hidden, w, true),
                    ffn_norm: init.layer_norm(&format!("{name}.ffn_norm"), w),
                }
            })
            .collect();
        Ok(Self {
            config,
            fourier,
            blocks,
        })
    }

    pub fn frequencies<T: Real>(&self, store: &crate::params::ParamStore<T>) -> Array2<f64> {
        store.value(self.fourier).mapv(|v| v.as_f64())
    }

    pub fn generate<T: Real>(&self, ctx: &Ctx<'_, T>, coords: &[Point3]) -> Result<PlaneQuerySet> {
        generate_queries(coords, self.config.queries, &self.frequencies(ctx.store))
    }

    pub fn block_forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, block: &DecoderBlock, q: Var, points: Var) -> (Var, Var) {
        let p = self.config.dropout;
        let (att, weights) = block.cross.forward(ctx, q, points);
        let cat = ctx.tape.concat_cols(&[att, q]);
        let merged = block.merge.forward(ctx, cat);
        let merged = ctx.dropout(merged, p);
        let x = ctx.tape.add(q, merged);
        let x = block.merge_norm.forward(ctx, x);
        let x = block.self_attention.forward(ctx, x);
        let h = block.ffn_in.forward(ctx, x);
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h, p);
        let h = block.ffn_out.forward(ctx, h);
        let h = ctx.dropout(h, p);
        let y = ctx.tape.add(x, h);
        (block.ffn_norm.forward(ctx, y), weights)
    }

    pub fn refine_queries<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        queries: &PlaneQuerySet,
        feats: &MultiScaleFeatures,
    ) -> Result<RefinedQueries> {
        if feats.levels.len() != LEVELS {
            return Err(Error::invalid(format!("expected {LEVELS} feature levels, got {}", feats.levels.len())));
        }
        let pos = ctx.tape.constant(queries.embeddings.mapv(T::of));
        let mut q = pos;
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (d, (block, level)) in self.blocks.iter().zip(self.config.schedule()).enumerate() {
            if d > 0 && self.config.reinject_position {
                q = ctx.tape.add(q, pos);
            }
            let (next, weights) = self.block_forward(ctx, block, q, feats.levels[level].features);
            q = next;
            states.push(q);
            attention.push(weights);
        }
        Ok(RefinedQueries { states, attention })
    }
}

/// Query-point products of one decoder stack pass, counted analytically.
pub fn analytic_query_point_products(config: &DecoderConfig, level_sizes: &[usize]) -> u64 {
    config
        .schedule()
        .into_iter()
        .map(|l| (config.queries * level_sizes[l]) as u64)
        .sum()
}

pub fn query_coords(coords: &[Point3], queries: &PlaneQuerySet) -> Array2<f64> {
    let picked: Vec<Point3> = queries.indices.iter().map(|&i| coords[i]).collect();
    points_to_array(&picked)
}
