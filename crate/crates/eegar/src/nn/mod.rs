//! Small explicit-backprop neural network stack in f64.
//!
//! No autograd: every layer exposes `forward` and a matching `backward` that
//! consumes the upstream gradient and accumulates parameter gradients.
//! Layers cache whatever activations their backward pass needs, so the usage
//! pattern is strictly forward-then-backward per step. All math is f64 and
//! all iteration orders are fixed, which makes whole training runs
//! reproducible bit-for-bit from a seed.

mod attention;
mod checkpoint;
mod conv;
mod dft;
mod embedding;
mod encoder;
mod gradcheck;
mod layernorm;
mod linear;
mod optim;
mod param;
mod rng;
mod tensor;
mod transformer;

pub use attention::{AttnMask, MultiHeadAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use conv::Conv1d;
pub use dft::dft_magnitude;
pub use dft::dft_magnitude_len;
pub use embedding::Embedding;
pub use encoder::{TemporalEncoder, TransformerStack};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layernorm::LayerNorm;
pub use linear::Linear;
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
pub use param::{Param, ParamVisitor};
pub use rng::{derive_seed, StreamRng};
pub use tensor::Tensor;
pub use transformer::TransformerBlock;

/// Gradient reversal: identity on the forward pass, multiplies the incoming
/// gradient by `-lambda` on the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct GradReverse {
    pub lambda: f64,
}

impl GradReverse {
    pub fn new(lambda: f64) -> Self {
        GradReverse { lambda }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        dy.iter().map(|g| -self.lambda * g).collect()
    }
}

/// GELU with the tanh approximation, matching the transformer blocks.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax over the last axis of a flat row, in place, numerically stable.
pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
