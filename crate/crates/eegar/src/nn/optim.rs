//! AdamW with decoupled weight decay plus the cosine learning-rate schedule.

use super::param::ParamVisitor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment state lives inside each `Param`;
/// the optimizer only tracks the step count for bias correction.
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, t: 0 }
    }

    pub fn step(&mut self, model: &mut dyn ParamVisitor, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        model.visit_params(&mut |_, p| {
            let decay = if p.no_decay { 0.0 } else { wd };
            for i in 0..p.data.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * p.data[i]);
            }
        });
    }
}

/// Linear warmup to `peak`, then cosine decay to `min` at `total` steps.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup || step >= self.total {
            return self.min;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(model: &mut dyn ParamVisitor, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |_, p| {
        for &g in &p.grad {
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        model.visit_params(&mut |_, p| {
            for g in &mut p.grad {
                *g *= scale;
            }
        });
    }
    norm
}
