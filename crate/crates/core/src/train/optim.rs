//! Adaptive-moment optimizer with decoupled weight decay, plus the
//! warmup-then-cosine learning-rate schedule.

use crate::numerics::{scalar, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to rank-2 tensors only (matrices and
    /// embeddings; biases and norm parameters are exempt).
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Moments<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

pub struct AdamW<S: Scalar> {
    cfg: OptimConfig,
    slots: Vec<Moments<S>>,
    t: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { cfg, slots: Vec::new(), t: 0 }
    }

    /// Call once per step before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter tensor; `slot` indexes the canonical parameter
    /// order and must be stable across steps.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<S>, grad: &[S], lr: f64) {
        debug_assert!(self.t >= 1, "begin_step before update");
        while self.slots.len() <= slot {
            self.slots.push(Moments { m: Vec::new(), v: Vec::new() });
        }
        let st = &mut self.slots[slot];
        if st.m.is_empty() {
            st.m = vec![S::zero(); param.numel()];
            st.v = vec![S::zero(); param.numel()];
        }
        debug_assert_eq!(st.m.len(), param.numel());

        let b1 = scalar::<S>(self.cfg.beta1);
        let b2 = scalar::<S>(self.cfg.beta2);
        let one = S::one();
        let bc1 = scalar::<S>(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = scalar::<S>(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = scalar::<S>(self.cfg.eps);
        let lr_s = scalar::<S>(lr);
        let decay = if param.shape().len() == 2 {
            scalar::<S>(lr * self.cfg.weight_decay)
        } else {
            S::zero()
        };

        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.iter())
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr_s * (m_hat / (v_hat.sqrt() + eps)) - decay * *p;
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            let x = x.to_f64().unwrap_or(0.0);
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let factor = scalar::<S>(clip / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * factor;
            }
        }
    }
    norm
}

/// Linear warmup to `peak` over `warmup_ratio * total`, then cosine decay
/// to zero at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (total * warmup_ratio).max(1.0);
    let s = step as f64;
    if s < warmup {
        peak * (s + 1.0) / warmup
    } else {
        let progress = ((s - warmup) / (total - warmup).max(1.0)).clamp(0.0, 1.0);
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
