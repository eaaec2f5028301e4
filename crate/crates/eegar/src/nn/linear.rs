//! Fully connected layer with explicit backward.

use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;

/// `y = x W^T + b` over a batch of rows.
///
/// Weights are stored row-major `[out][in]`. Forward pushes the input onto an
/// internal cache stack and backward pops it, so a shared instance may be
/// applied several times per step as long as backwards run in reverse order
/// of forwards.
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Param,
    pub b: Option<Param>,
    cache: Vec<Vec<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            w: Param::new(rng.normal_vec(in_dim * out_dim, std)),
            b: Some(Param::new_no_decay(vec![0.0; out_dim])),
            cache: Vec::new(),
        }
    }

    /// All-zero weights and bias. Used for output heads that must start as
    /// the constant function.
    pub fn new_zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: Param::zeros(in_dim * out_dim),
            b: Some(Param::new_no_decay(vec![0.0; out_dim])),
            cache: Vec::new(),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.b = None;
        self
    }

    /// `x` is `[n, in_dim]` flattened; returns `[n, out_dim]` flattened.
    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len() % self.in_dim, 0, "input not a multiple of in_dim");
        let n = x.len() / self.in_dim;
        let mut y = vec![0.0; n * self.out_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let yi = &mut y[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, yo) in yi.iter_mut().enumerate() {
                let wr = &self.w.data[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = 0.0;
                for (a, b) in xi.iter().zip(wr.iter()) {
                    acc += a * b;
                }
                *yo = acc;
            }
            if let Some(b) = &self.b {
                for (yo, bo) in yi.iter_mut().zip(b.data.iter()) {
                    *yo += bo;
                }
            }
        }
        self.cache.push(x.to_vec());
        y
    }

    /// Consumes the most recent cached input; returns `dx`.
    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let x = self.cache.pop().expect("backward without matching forward");
        let n = x.len() / self.in_dim;
        assert_eq!(dy.len(), n * self.out_dim);
        let mut dx = vec![0.0; x.len()];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let dyi = &dy[i * self.out_dim..(i + 1) * self.out_dim];
            let dxi = &mut dx[i * self.in_dim..(i + 1) * self.in_dim];
            for (o, &g) in dyi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wr = &self.w.data[o * self.in_dim..(o + 1) * self.in_dim];
                let gw = &mut self.w.grad[o * self.in_dim..(o + 1) * self.in_dim];
                for k in 0..self.in_dim {
                    dxi[k] += g * wr[k];
                    gw[k] += g * xi[k];
                }
            }
            if let Some(b) = &mut self.b {
                for (gb, &g) in b.grad.iter_mut().zip(dyi.iter()) {
                    *gb += g;
                }
            }
        }
        dx
    }

    /// Discards cached activations from forwards that will not be backpropagated.
    pub fn clear_caches(&mut self) {
        self.cache.clear();
    }
}

impl ParamVisitor for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        if let Some(b) = &mut self.b {
            f("b", b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_computation() {
        let mut l = Linear::new_zeros(2, 2);
        l.w.data = vec![1.0, 2.0, 3.0, 4.0]; // rows: [1,2], [3,4]
        l.b.as_mut().unwrap().data = vec![10.0, 20.0];
        let y = l.forward(&[1.0, 1.0, 0.5, -0.5]);
        assert_eq!(y, vec![13.0, 27.0, 9.5, 19.5]);
    }

    #[test]
    fn backward_accumulates_over_repeated_application() {
        let mut l = Linear::new_zeros(2, 1);
        l.w.data = vec![1.0, -1.0];
        let _ = l.forward(&[1.0, 2.0]);
        let _ = l.forward(&[3.0, 4.0]);
        // Reverse order: second forward first.
        let dx2 = l.backward(&[1.0]);
        let dx1 = l.backward(&[1.0]);
        assert_eq!(dx2, vec![1.0, -1.0]);
        assert_eq!(dx1, vec![1.0, -1.0]);
        // dw = x1 + x2 summed over both applications.
        assert_eq!(l.w.grad, vec![4.0, 6.0]);
        assert_eq!(l.b.as_ref().unwrap().grad, vec![2.0]);
    }
}
