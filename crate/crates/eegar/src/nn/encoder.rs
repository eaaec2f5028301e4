//! Temporal patch encoder and a plain stack of transformer blocks.

use super::attention::AttnMask;
use super::conv::Conv1d;
use super::{gelu, gelu_prime};
use super::linear::Linear;
use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;
use super::transformer::TransformerBlock;

/// Sequential transformer blocks sharing one mask per forward pass.
pub struct TransformerStack {
    pub dim: usize,
    blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(layers: usize, dim: usize, heads: usize, mlp: usize, rng: &mut StreamRng) -> Self {
        TransformerStack {
            dim,
            blocks: (0..layers)
                .map(|_| TransformerBlock::new(dim, heads, mlp, rng))
                .collect(),
        }
    }

    pub fn forward(&mut self, x: &[f64], mask: &AttnMask) -> Vec<f64> {
        let mut h = x.to_vec();
        for b in &mut self.blocks {
            h = b.forward(&h, mask);
        }
        h
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let mut d = dy.to_vec();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }

    pub fn clear_caches(&mut self) {
        for b in &mut self.blocks {
            b.clear_caches();
        }
    }
}

impl ParamVisitor for TransformerStack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("block{i}.");
            b.visit_params(&mut |name, p| f(&format!("{prefix}{name}"), p));
        }
    }
}

/// Encodes one single-channel patch of `patch_len` samples into a C-vector:
/// a fixed three-conv front end (stride 8 first, so 200 samples become 25
/// positions), a transformer over those positions, mean pooling, and a
/// linear projection.
pub struct TemporalEncoder {
    patch_len: usize,
    seq_len: usize,
    conv: Vec<Conv1d>,
    proj_in: Linear,
    pos: Param,
    stack: TransformerStack,
    proj_out: Linear,
    mask: AttnMask,
    hidden: usize,
    out_dim: usize,
    // per forward: conv pre-activations for the gelu backward
    cache: Vec<Vec<Vec<f64>>>,
}

const CONV_CH: [(usize, usize); 3] = [(1, 16), (16, 16), (16, 16)];
const CONV_K: [usize; 3] = [15, 3, 3];
const CONV_STRIDE: [usize; 3] = [8, 1, 1];
const CONV_PAD: [usize; 3] = [7, 1, 1];

impl TemporalEncoder {
    pub fn new(
        patch_len: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        mlp: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let conv: Vec<Conv1d> = (0..3)
            .map(|i| {
                Conv1d::new(
                    CONV_CH[i].0,
                    CONV_CH[i].1,
                    CONV_K[i],
                    CONV_STRIDE[i],
                    CONV_PAD[i],
                    rng,
                )
            })
            .collect();
        let mut seq_len = patch_len;
        for c in &conv {
            seq_len = c.out_len(seq_len);
        }
        TemporalEncoder {
            patch_len,
            seq_len,
            conv,
            proj_in: Linear::new(16, hidden, rng),
            pos: Param::new_no_decay(rng.normal_vec(seq_len * hidden, 0.02)),
            stack: TransformerStack::new(layers, hidden, heads, mlp, rng),
            proj_out: Linear::new(hidden, out_dim, rng),
            mask: AttnMask::full(seq_len),
            hidden,
            out_dim,
            cache: Vec::new(),
        }
    }

    /// Positions the stride-8 front end produces per patch (25 for P=200).
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    /// Zeroes the output projection so a fresh model emits zero features.
    pub fn zero_output(&mut self) {
        self.proj_out.w.data.iter_mut().for_each(|w| *w = 0.0);
    }

    /// One patch `[patch_len]` to one feature vector `[out_dim]`.
    pub fn forward(&mut self, patch: &[f64]) -> Vec<f64> {
        assert_eq!(patch.len(), self.patch_len);
        let mut h = patch.to_vec();
        let mut len = self.patch_len;
        let mut pres = Vec::with_capacity(3);
        for c in self.conv.iter_mut() {
            let pre = c.forward(&h, len);
            len = c.out_len(len);
            h = pre.iter().map(|&v| gelu(v)).collect();
            pres.push(pre);
        }
        self.cache.push(pres);
        // [16, seq] to sequence-major [seq, 16]
        let mut seq = vec![0.0; self.seq_len * 16];
        for ch in 0..16 {
            for t in 0..self.seq_len {
                seq[t * 16 + ch] = h[ch * self.seq_len + t];
            }
        }
        let mut x = self.proj_in.forward(&seq);
        for (xi, pi) in x.iter_mut().zip(&self.pos.data) {
            *xi += pi;
        }
        let y = self.stack.forward(&x, &self.mask);
        // mean over positions, then project
        let mut pooled = vec![0.0; self.hidden];
        for t in 0..self.seq_len {
            for c in 0..self.hidden {
                pooled[c] += y[t * self.hidden + c] / self.seq_len as f64;
            }
        }
        self.proj_out.forward(&pooled)
    }

    /// Backward for the most recent un-popped `forward`; returns nothing
    /// useful for the caller (the input is data, not parameters).
    pub fn backward(&mut self, dout: &[f64]) {
        assert_eq!(dout.len(), self.out_dim);
        let dpooled = self.proj_out.backward(dout);
        let mut dy = vec![0.0; self.seq_len * self.hidden];
        for t in 0..self.seq_len {
            for c in 0..self.hidden {
                dy[t * self.hidden + c] = dpooled[c] / self.seq_len as f64;
            }
        }
        let dx = self.stack.backward(&dy);
        for (g, d) in self.pos.grad.iter_mut().zip(&dx) {
            *g += d;
        }
        let dseq = self.proj_in.backward(&dx);
        let mut dh = vec![0.0; 16 * self.seq_len];
        for ch in 0..16 {
            for t in 0..self.seq_len {
                dh[ch * self.seq_len + t] = dseq[t * 16 + ch];
            }
        }
        let pres = self.cache.pop().expect("backward without matching forward");
        for (c, pre) in self.conv.iter_mut().zip(pres.iter()).rev() {
            let dpre: Vec<f64> = dh
                .iter()
                .zip(pre.iter())
                .map(|(d, &p)| d * gelu_prime(p))
                .collect();
            dh = c.backward(&dpre);
        }
    }

    /// Discards cached activations from inference-only forwards.
    pub fn clear_caches(&mut self) {
        self.cache.clear();
        for c in &mut self.conv {
            c.clear_caches();
        }
        self.proj_in.clear_caches();
        self.stack.clear_caches();
        self.proj_out.clear_caches();
    }

    /// Number of forwards still awaiting a backward (or a cache clear).
    pub fn pending_backwards(&self) -> usize {
        self.cache.len()
    }
}

impl ParamVisitor for TemporalEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.conv.iter_mut().enumerate() {
            let prefix = format!("conv{i}.");
            c.visit_params(&mut |name, p| f(&format!("{prefix}{name}"), p));
        }
        self.proj_in
            .visit_params(&mut |name, p| f(&format!("proj_in.{name}"), p));
        f("pos", &mut self.pos);
        self.stack
            .visit_params(&mut |name, p| f(&format!("stack.{name}"), p));
        self.proj_out
            .visit_params(&mut |name, p| f(&format!("proj_out.{name}"), p));
    }
}
