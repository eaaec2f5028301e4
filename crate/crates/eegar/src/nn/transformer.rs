//! Pre-norm transformer block: attention and MLP sublayers with residuals.

use super::attention::{AttnMask, MultiHeadAttention};
use super::layernorm::LayerNorm;
use super::linear::Linear;
use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;
use super::{gelu, gelu_prime};

/// `y = h + W2 gelu(W1 ln2(h))` where `h = x + attn(ln1(x))`.
pub struct TransformerBlock {
    pub dim: usize,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    /// gelu pre-activations per forward call.
    cache: Vec<Vec<f64>>,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut StreamRng) -> Self {
        TransformerBlock {
            dim,
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, mlp_dim, rng),
            fc2: Linear::new(mlp_dim, dim, rng),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &[f64], mask: &AttnMask) -> Vec<f64> {
        let a = self.attn.forward(&self.ln1.forward(x), mask);
        let h: Vec<f64> = x.iter().zip(a.iter()).map(|(u, v)| u + v).collect();
        let pre = self.fc1.forward(&self.ln2.forward(&h));
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let m = self.fc2.forward(&act);
        self.cache.push(pre);
        h.iter().zip(m.iter()).map(|(u, v)| u + v).collect()
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let pre = self.cache.pop().expect("backward without matching forward");
        let dact = self.fc2.backward(dy);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(pre.iter())
            .map(|(g, &p)| g * gelu_prime(p))
            .collect();
        let dln2 = self.fc1.backward(&dpre);
        let mut dh = self.ln2.backward(&dln2);
        for (d, g) in dh.iter_mut().zip(dy.iter()) {
            *d += g;
        }
        let dln1 = self.attn.backward(&dh);
        let mut dx = self.ln1.backward(&dln1);
        for (d, g) in dx.iter_mut().zip(dh.iter()) {
            *d += g;
        }
        dx
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
        self.ln1.clear_caches();
        self.attn.clear_caches();
        self.ln2.clear_caches();
        self.fc1.clear_caches();
        self.fc2.clear_caches();
    }
}

impl ParamVisitor for TransformerBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_params(&mut |n, p| f(&format!("ln1.{n}"), p));
        self.attn.visit_params(&mut |n, p| f(&format!("attn.{n}"), p));
        self.ln2.visit_params(&mut |n, p| f(&format!("ln2.{n}"), p));
        self.fc1.visit_params(&mut |n, p| f(&format!("fc1.{n}"), p));
        self.fc2.visit_params(&mut |n, p| f(&format!("fc2.{n}"), p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shape_and_determinism() {
        let mut r1 = StreamRng::new(3, "blk");
        let mut b1 = TransformerBlock::new(8, 2, 16, &mut r1);
        let mut r2 = StreamRng::new(3, "blk");
        let mut b2 = TransformerBlock::new(8, 2, 16, &mut r2);
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.13).sin()).collect();
        let y1 = b1.forward(&x, &AttnMask::causal(3));
        let y2 = b2.forward(&x, &AttnMask::causal(3));
        assert_eq!(y1.len(), 24);
        assert_eq!(y1, y2);
    }

    #[test]
    fn causality_survives_the_residual_path() {
        let mut rng = StreamRng::new(7, "blk");
        let mut b = TransformerBlock::new(8, 2, 16, &mut rng);
        let mask = AttnMask::causal(3);
        let mut x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.29).cos()).collect();
        let y1 = b.forward(&x, &mask);
        for v in &mut x[16..24] {
            *v = -*v + 0.7;
        }
        let y2 = b.forward(&x, &mask);
        assert_eq!(&y1[..16], &y2[..16]);
    }
}
