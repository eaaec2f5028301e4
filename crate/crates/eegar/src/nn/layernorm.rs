//! Layer normalization over the last axis.

use super::param::{Param, ParamVisitor};

const EPS: f64 = 1e-5;

/// Per-row normalization with learned gain and bias.
pub struct LayerNorm {
    pub dim: usize,
    pub gain: Param,
    pub bias: Param,
    /// (normalized rows, inverse std per row)
    cache: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            dim,
            gain: Param::new_no_decay(vec![1.0; dim]),
            bias: Param::new_no_decay(vec![0.0; dim]),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len() % self.dim, 0);
        let n = x.len() / self.dim;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let xi = &x[i * self.dim..(i + 1) * self.dim];
            let mean = xi.iter().sum::<f64>() / self.dim as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.dim as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..self.dim {
                let h = (xi[j] - mean) * istd;
                xhat[i * self.dim + j] = h;
                y[i * self.dim + j] = h * self.gain.data[j] + self.bias.data[j];
            }
        }
        self.cache.push((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (xhat, inv_std) = self.cache.pop().expect("backward without matching forward");
        let n = xhat.len() / self.dim;
        assert_eq!(dy.len(), xhat.len());
        let mut dx = vec![0.0; xhat.len()];
        let d = self.dim as f64;
        for i in 0..n {
            let h = &xhat[i * self.dim..(i + 1) * self.dim];
            let g = &dy[i * self.dim..(i + 1) * self.dim];
            let mut sum_gg = 0.0; // sum of dy*gain
            let mut sum_ggh = 0.0; // sum of dy*gain*xhat
            for j in 0..self.dim {
                let gg = g[j] * self.gain.data[j];
                sum_gg += gg;
                sum_ggh += gg * h[j];
                self.gain.grad[j] += g[j] * h[j];
                self.bias.grad[j] += g[j];
            }
            let istd = inv_std[i];
            for j in 0..self.dim {
                let gg = g[j] * self.gain.data[j];
                dx[i * self.dim + j] = istd * (gg - sum_gg / d - h[j] * sum_ggh / d);
            }
        }
        dx
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
    }
}

impl ParamVisitor for LayerNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gain", &mut self.gain);
        f("bias", &mut self.bias);
    }
}
