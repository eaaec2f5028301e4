//! 1-D convolution with zero padding and explicit backward.

use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;

/// Cross-correlation over the last axis of a `[in_ch, len]` input, producing
/// `[out_ch, out_len]` with `out_len = (len + 2*padding - kernel)/stride + 1`.
/// Weights are `[out_ch][in_ch][kernel]`, padding is zero-valued.
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub w: Param,
    pub b: Param,
    cache: Vec<(Vec<f64>, usize)>,
}

impl Conv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let std = (1.0 / (in_ch * kernel) as f64).sqrt();
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            w: Param::new(rng.normal_vec(out_ch * in_ch * kernel, std)),
            b: Param::new_no_decay(vec![0.0; out_ch]),
            cache: Vec::new(),
        }
    }

    /// Same-shape channel-preserving conv initialized to the identity map:
    /// center tap of each channel's own filter is 1, everything else 0.
    pub fn new_identity(channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "identity conv needs an odd kernel");
        let mut w = vec![0.0; channels * channels * kernel];
        let center = kernel / 2;
        for c in 0..channels {
            w[(c * channels + c) * kernel + center] = 1.0;
        }
        Conv1d {
            in_ch: channels,
            out_ch: channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            w: Param::new(w),
            b: Param::new_no_decay(vec![0.0; channels]),
            cache: Vec::new(),
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// `x` is `[in_ch, len]` flattened row-major.
    pub fn forward(&mut self, x: &[f64], len: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.in_ch * len);
        let out_len = self.out_len(len);
        let mut y = vec![0.0; self.out_ch * out_len];
        for o in 0..self.out_ch {
            let yo = &mut y[o * out_len..(o + 1) * out_len];
            for ic in 0..self.in_ch {
                let xi = &x[ic * len..(ic + 1) * len];
                let wr = &self.w.data[(o * self.in_ch + ic) * self.kernel
                    ..(o * self.in_ch + ic + 1) * self.kernel];
                for (t, yt) in yo.iter_mut().enumerate() {
                    let start = (t * self.stride) as isize - self.padding as isize;
                    let mut acc = 0.0;
                    for (k, &wk) in wr.iter().enumerate() {
                        let src = start + k as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += wk * xi[src as usize];
                        }
                    }
                    *yt += acc;
                }
            }
            let bo = self.b.data[o];
            for yt in yo.iter_mut() {
                *yt += bo;
            }
        }
        self.cache.push((x.to_vec(), len));
        y
    }

    /// `dy` is `[out_ch, out_len]`; returns `dx` of `[in_ch, len]`.
    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (x, len) = self.cache.pop().expect("backward without matching forward");
        let out_len = self.out_len(len);
        assert_eq!(dy.len(), self.out_ch * out_len);
        let mut dx = vec![0.0; x.len()];
        for o in 0..self.out_ch {
            let dyo = &dy[o * out_len..(o + 1) * out_len];
            for ic in 0..self.in_ch {
                let xi = &x[ic * len..(ic + 1) * len];
                let dxi = &mut dx[ic * len..(ic + 1) * len];
                let base = (o * self.in_ch + ic) * self.kernel;
                for (t, &g) in dyo.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let start = (t * self.stride) as isize - self.padding as isize;
                    for k in 0..self.kernel {
                        let src = start + k as isize;
                        if src >= 0 && (src as usize) < len {
                            let s = src as usize;
                            self.w.grad[base + k] += g * xi[s];
                            dxi[s] += g * self.w.data[base + k];
                        }
                    }
                }
            }
            let mut acc = 0.0;
            for &g in dyo {
                acc += g;
            }
            self.b.grad[o] += acc;
        }
        dx
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
    }
}

impl ParamVisitor for Conv1d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_matches_formula() {
        let mut rng = StreamRng::new(0, "t");
        let c = Conv1d::new(1, 16, 15, 8, 7, &mut rng);
        assert_eq!(c.out_len(200), 25);
        let c2 = Conv1d::new(16, 16, 3, 1, 1, &mut rng);
        assert_eq!(c2.out_len(25), 25);
    }

    #[test]
    fn identity_conv_reproduces_input() {
        let mut c = Conv1d::new_identity(3, 3);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let y = c.forward(&x, 4);
        assert_eq!(y, x);
    }

    #[test]
    fn hand_checked_stride_and_padding() {
        let mut rng = StreamRng::new(0, "t");
        let mut c = Conv1d::new(1, 1, 3, 2, 1, &mut rng);
        c.w.data = vec![1.0, 2.0, 3.0];
        c.b.data = vec![0.5];
        // x = [1, 2, 3, 4]; padded: [0,1,2,3,4,0]; windows at stride 2.
        let y = c.forward(&[1.0, 2.0, 3.0, 4.0], 4);
        // t0: 0*1+1*2+2*3 = 8; t1: 2*1+3*2+4*3 = 20; all +0.5.
        assert_eq!(y, vec![8.5, 20.5]);
    }
}
