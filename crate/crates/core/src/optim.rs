//! AdamW with a cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::params::{ParamId, ParamStore};
use crate::tape::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub initial: f64,
    pub minimum: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Linear warmup, then cosine decay from `initial` to `minimum`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.initial * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.minimum + 0.5 * (self.initial - self.minimum) * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub steps: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let shaped: Vec<Array2<T>> = store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: shaped.clone(),
            v: shaped,
        }
    }

    /// Applies one update. `grads[i]` pairs with parameter `i`; `None`
    /// leaves that parameter (and its moments) untouched. Weight decay
    /// applies to matrices named `*.w` only.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Array2<T>>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let decay = if store.name(id).ends_with(".w") { self.weight_decay } else { 0.0 };
            let keep = T::of(1.0 - lr * decay);
            let p = store.value_mut(id);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + ob1 * g;
                    *v = b2 * *v + ob2 * g * g;
                    let denom = (*v * inv_c2).sqrt() + eps;
                    *p = *p * keep - step_size * *m / denom;
                });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Array2<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
