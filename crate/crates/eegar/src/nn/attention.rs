//! Multi-head self-attention over an arbitrary permission mask.

use super::linear::Linear;
use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;

/// Dense n-by-n permission bitset: `permitted(q, k)` says whether query
/// position `q` may attend to key position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    bits: Vec<u64>,
}

impl AttnMask {
    pub fn none(n: usize) -> Self {
        AttnMask {
            n,
            bits: vec![0u64; n * n.div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |q, k| k <= q)
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::none(n);
        for q in 0..n {
            for k in 0..n {
                if f(q, k) {
                    m.permit(q, k);
                }
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn words_per_row(&self) -> usize {
        self.n.div_ceil(64)
    }

    pub fn permit(&mut self, q: usize, k: usize) {
        assert!(q < self.n && k < self.n);
        let w = self.words_per_row();
        self.bits[q * w + k / 64] |= 1u64 << (k % 64);
    }

    pub fn forbid(&mut self, q: usize, k: usize) {
        assert!(q < self.n && k < self.n);
        let w = self.words_per_row();
        self.bits[q * w + k / 64] &= !(1u64 << (k % 64));
    }

    #[inline]
    pub fn permitted(&self, q: usize, k: usize) -> bool {
        let w = self.words_per_row();
        (self.bits[q * w + k / 64] >> (k % 64)) & 1 == 1
    }

    /// Permitted key indices for query `q`, ascending.
    pub fn keys_of(&self, q: usize) -> Vec<usize> {
        (0..self.n).filter(|&k| self.permitted(q, k)).collect()
    }

    /// True iff every permitted edge of `self` is also permitted in `other`.
    pub fn subset_of(&self, other: &AttnMask) -> bool {
        assert_eq!(self.n, other.n);
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(a, b)| a & !b == 0)
    }

    /// Union of two masks of equal size.
    pub fn union(&self, other: &AttnMask) -> AttnMask {
        assert_eq!(self.n, other.n);
        AttnMask {
            n: self.n,
            bits: self
                .bits
                .iter()
                .zip(other.bits.iter())
                .map(|(a, b)| a | b)
                .collect(),
        }
    }

    /// True iff permission is transitive: `a->b` and `b->c` imply `a->c`.
    pub fn is_transitive(&self) -> bool {
        for a in 0..self.n {
            for b in 0..self.n {
                if a != b && self.permitted(a, b) {
                    for c in 0..self.n {
                        if self.permitted(b, c) && !self.permitted(a, c) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Dense `[heads, n, n]` attention probabilities; non-permitted entries
    /// stay exactly 0 and are never read back.
    probs: Vec<f64>,
    mask: AttnMask,
}

/// Multi-head self-attention. Keys a query is not permitted to see are never
/// touched: their scores are not computed and they contribute no terms to the
/// softmax or the value sum. Changing a forbidden position therefore leaves a
/// query's output bit-for-bit unchanged.
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    cache: Vec<AttnCache>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut StreamRng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            dim,
            heads,
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            cache: Vec::new(),
        }
    }

    /// `x` is `[n, dim]`; every query must have at least one permitted key.
    pub fn forward(&mut self, x: &[f64], mask: &AttnMask) -> Vec<f64> {
        let n = mask.len();
        assert_eq!(x.len(), n * self.dim);
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; self.heads * n * n];
        let mut ctx = vec![0.0; n * self.dim];
        let mut scores: Vec<(usize, f64)> = Vec::with_capacity(n);
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..n {
                let qi = &q[i * self.dim + off..i * self.dim + off + hd];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if !mask.permitted(i, j) {
                        continue;
                    }
                    let kj = &k[j * self.dim + off..j * self.dim + off + hd];
                    let mut s = 0.0;
                    for (a, b) in qi.iter().zip(kj.iter()) {
                        s += a * b;
                    }
                    s *= scale;
                    if s > max {
                        max = s;
                    }
                    scores.push((j, s));
                }
                assert!(!scores.is_empty(), "query {i} has no permitted keys");
                let mut sum = 0.0;
                for (_, s) in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let ci = &mut ctx[i * self.dim + off..i * self.dim + off + hd];
                for &(j, e) in scores.iter() {
                    let p = e / sum;
                    probs[(h * n + i) * n + j] = p;
                    let vj = &v[j * self.dim + off..j * self.dim + off + hd];
                    for (c, vv) in ci.iter_mut().zip(vj.iter()) {
                        *c += p * vv;
                    }
                }
            }
        }
        let y = self.wo.forward(&ctx);
        self.cache.push(AttnCache {
            q,
            k,
            v,
            probs,
            mask: mask.clone(),
        });
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let AttnCache {
            q,
            k,
            v,
            probs,
            mask,
        } = self.cache.pop().expect("backward without matching forward");
        let n = mask.len();
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dctx = self.wo.backward(dy);
        let mut dq = vec![0.0; n * self.dim];
        let mut dk = vec![0.0; n * self.dim];
        let mut dv = vec![0.0; n * self.dim];
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..n {
                let di = &dctx[i * self.dim + off..i * self.dim + off + hd];
                // dp_j = di . v_j ; softmax backward needs sum_j p_j dp_j.
                let mut dot = 0.0;
                for j in 0..n {
                    let p = probs[(h * n + i) * n + j];
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[j * self.dim + off..j * self.dim + off + hd];
                    let mut dp = 0.0;
                    for (a, b) in di.iter().zip(vj.iter()) {
                        dp += a * b;
                    }
                    dot += p * dp;
                }
                let qi = &q[i * self.dim + off..i * self.dim + off + hd];
                for j in 0..n {
                    let p = probs[(h * n + i) * n + j];
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[j * self.dim + off..j * self.dim + off + hd];
                    let mut dp = 0.0;
                    for (a, b) in di.iter().zip(vj.iter()) {
                        dp += a * b;
                    }
                    let ds = p * (dp - dot) * scale;
                    let kj = &k[j * self.dim + off..j * self.dim + off + hd];
                    let dqi = &mut dq[i * self.dim + off..i * self.dim + off + hd];
                    for (g, b) in dqi.iter_mut().zip(kj.iter()) {
                        *g += ds * b;
                    }
                    let dkj = &mut dk[j * self.dim + off..j * self.dim + off + hd];
                    for (g, a) in dkj.iter_mut().zip(qi.iter()) {
                        *g += ds * a;
                    }
                    let dvj = &mut dv[j * self.dim + off..j * self.dim + off + hd];
                    for (g, a) in dvj.iter_mut().zip(di.iter()) {
                        *g += p * a;
                    }
                }
            }
        }
        let dx_q = self.wq.backward(&dq);
        let dx_k = self.wk.backward(&dk);
        let dx_v = self.wv.backward(&dv);
        let mut dx = dx_q;
        for ((a, b), c) in dx.iter_mut().zip(dx_k.iter()).zip(dx_v.iter()) {
            *a += b + c;
        }
        dx
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
        self.wq.clear_caches();
        self.wk.clear_caches();
        self.wv.clear_caches();
        self.wo.clear_caches();
    }
}

impl ParamVisitor for MultiHeadAttention {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_params(&mut |n, p| f(&format!("wq.{n}"), p));
        self.wk.visit_params(&mut |n, p| f(&format!("wk.{n}"), p));
        self.wv.visit_params(&mut |n, p| f(&format!("wv.{n}"), p));
        self.wo.visit_params(&mut |n, p| f(&format!("wo.{n}"), p));
    }
}
