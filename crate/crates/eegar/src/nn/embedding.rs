//! Token embedding table.

use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;

/// Lookup table `[vocab, dim]` with scatter-add backward.
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    pub table: Param,
    cache: Vec<Vec<usize>>,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, std: f64, rng: &mut StreamRng) -> Self {
        Embedding {
            vocab,
            dim,
            table: Param::new_no_decay(rng.normal_vec(vocab * dim, std)),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, ids: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            assert!(id < self.vocab, "token {id} out of vocab {}", self.vocab);
            out.extend_from_slice(&self.table.data[id * self.dim..(id + 1) * self.dim]);
        }
        self.cache.push(ids.to_vec());
        out
    }

    /// Row `id` without recording a cache entry (inference-only lookup).
    pub fn lookup(&self, id: usize) -> &[f64] {
        &self.table.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn backward(&mut self, dy: &[f64]) {
        let ids = self.cache.pop().expect("backward without matching forward");
        assert_eq!(dy.len(), ids.len() * self.dim);
        for (i, &id) in ids.iter().enumerate() {
            let src = &dy[i * self.dim..(i + 1) * self.dim];
            let dst = &mut self.table.grad[id * self.dim..(id + 1) * self.dim];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn clear_caches(&mut self) {
        self.cache.clear();
    }
}

impl ParamVisitor for Embedding {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("table", &mut self.table);
    }
}
