//! Layer building blocks shared by the backbone, the decoders and the heads.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Real, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Parameter registration with a seeded initializer.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    /// Xavier-uniform weights, zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            T::of(self.rng.random_range(-bound..bound))
        });
        let weight = self.store.add(format!("{name}.w"), w, true);
        let bias = bias.then(|| self.store.add(format!("{name}.b"), Array2::zeros((1, fan_out)), true));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.store.add(format!("{name}.gamma"), Array2::ones((1, dim)), true),
            beta: self.store.add(format!("{name}.beta"), Array2::zeros((1, dim)), true),
        }
    }

    pub fn mlp(&mut self, name: &str, widths: &[usize], relu_last: bool) -> Mlp {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Mlp {
            layers,
            relu_last,
            point_norm: false,
        }
    }

    /// MLP whose every layer output is standardized per channel over the
    /// rows before its activation.
    pub fn point_mlp(&mut self, name: &str, widths: &[usize]) -> Mlp {
        Mlp {
            point_norm: true,
            ..self.mlp(name, widths, true)
        }
    }
}

/// Forward-pass context: the tape, read-only parameters, train/eval mode and
/// the dropout RNG.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    train: bool,
    rng: ChaCha8Rng,
    /// Query-point products performed by decoder cross-attention.
    pub query_point_products: u64,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            query_point_products: 0,
        }
    }

    pub fn train(store: &'s ParamStore<T>, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            query_point_products: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.train && p > 0.0 {
            self.tape.dropout(x, p, &mut self.rng)
        } else {
            x
        }
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        self.tape.value(v)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let n = ctx.tape.layer_norm_rows(x, T::of(LN_EPS));
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let y = ctx.tape.mul(n, g);
        ctx.tape.add(y, b)
    }
}

/// Point-wise MLP with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
    pub point_norm: bool,
}

impl Mlp {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        self.forward_with_dropout(ctx, x, 0.0)
    }

    /// Dropout `p` is applied after every hidden activation.
    pub fn forward_with_dropout<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, p: f64) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h);
            if self.point_norm && ctx.tape.shape(h).0 > 1 {
                h = ctx.tape.norm_cols(h, T::of(LN_EPS));
            }
            if i < last || self.relu_last {
                h = ctx.tape.relu(h);
            }
            if i < last {
                h = ctx.dropout(h, p);
            }
        }
        h
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

/// Single-head self-attention followed by residual and layer norm:
/// `LN(x + dropout(softmax(q k^T / sqrt(d)) v W_o))`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub inner: usize,
    pub dropout: f64,
}

/// Attention output before the residual, plus the attention map.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Var,
}

impl SelfAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize, inner: usize, dropout: f64) -> Self {
        Self {
            query: init.linear(&format!("{name}.q"), width, inner, true),
            key: init.linear(&format!("{name}.k"), width, inner, true),
            value: init.linear(&format!("{name}.v"), width, inner, true),
            out: init.linear(&format!("{name}.o"), inner, width, true),
            norm: init.layer_norm(&format!("{name}.norm"), width),
            inner,
            dropout,
        }
    }

    pub fn attend<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> AttentionTrace {
        let q = self.query.forward(ctx, x);
        let k = self.key.forward(ctx, x);
        let v = self.value.forward(ctx, x);
        let scale = T::of(1.0 / (self.inner as f64).sqrt());
        let logits = ctx.tape.matmul_nt(q, k, scale);
        let weights = ctx.tape.softmax_rows(logits);
        let mixed = ctx.tape.matmul(weights, v);
        let output = self.out.forward(ctx, mixed);
        AttentionTrace { output, weights }
    }

    /// `x + dropout(attention(x))`, before normalization.
    pub fn residual<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let a = self.attend(ctx, x).output;
        let a = ctx.dropout(a, self.dropout);
        ctx.tape.add(x, a)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let r = self.residual(ctx, x);
        self.norm.forward(ctx, r)
    }
}
