//! Shared codebook and the multi-scale residual quantizer.
//!
//! One codebook serves every scale: a token is an index into the same
//! `[V, C]` table no matter which hierarchy level produced it. Encoding
//! walks the selected scales coarse to fine, quantizing the pooled residual
//! and subtracting the refined broadcast of what the codes explain so far;
//! decoding replays the same sum without the residual bookkeeping.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bth::{downscale, upscale, BthError, Hierarchy, ScaleSubset};
use crate::nn::{Conv1d, Param, ParamVisitor, StreamRng, Tensor};

pub const EMA_DECAY: f64 = 0.99;
pub const COMMITMENT_BETA: f64 = 0.25;
/// Codes unused for this many consecutive epochs get reseeded.
pub const RESEED_AFTER_EPOCHS: u32 = 2;

const CODEBOOK_MAGIC: &[u8; 4] = b"EGCB";
const CODEBOOK_VERSION: u32 = 1;
const TOKENS_MAGIC: &[u8; 4] = b"EGTS";
const TOKENS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("codebook must have at least one row")]
    EmptyCodebook,
    #[error("codebook holds {vocab} rows, more than a u16 token can address")]
    VocabTooLarge { vocab: usize },
    #[error("feature dimension {found}, codebook expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("map shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("token {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: u16, vocab: usize },
    #[error(transparent)]
    Hierarchy(#[from] BthError),
    #[error("{0}")]
    Format(String),
    #[error("checksum mismatch, file corrupted")]
    HashMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token grid for one scale of one window: `ids[g * t_len + t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub scale: usize,
    pub groups: usize,
    pub t_len: usize,
    pub ids: Vec<u16>,
}

impl TokenMap {
    pub fn id(&self, g: usize, t: usize) -> u16 {
        self.ids[g * self.t_len + t]
    }
}

/// One token map per selected scale, coarse to fine.
pub type MultiScaleTokens = Vec<TokenMap>;

/// Learnable `[V, C]` code table with EMA training state.
///
/// The EMA state lives in count-normalized form: `row = ema_sum / ema_count`
/// with counts starting at 1 and sums at the row itself, so a single
/// assigned feature moves the row by exactly `(1 - decay)` of the gap.
#[derive(Debug, Clone)]
pub struct Codebook {
    dim: usize,
    rows: Vec<f64>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
    epoch_usage: Vec<u64>,
    stale_epochs: Vec<u32>,
}

impl Codebook {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self, VqError> {
        let mut rng = StreamRng::new(seed, "codebook/init");
        let rows = rng.normal_vec(vocab * dim, 1.0 / (dim as f64).sqrt());
        Self::from_rows(dim, rows)
    }

    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Result<Self, VqError> {
        if rows.is_empty() || dim == 0 {
            return Err(VqError::EmptyCodebook);
        }
        if rows.len() % dim != 0 {
            return Err(VqError::DimMismatch {
                expected: dim,
                found: rows.len() % dim,
            });
        }
        let vocab = rows.len() / dim;
        if vocab > u16::MAX as usize + 1 {
            return Err(VqError::VocabTooLarge { vocab });
        }
        Ok(Codebook {
            dim,
            ema_sum: rows.clone(),
            rows,
            ema_count: vec![1.0; vocab],
            epoch_usage: vec![0; vocab],
            stale_epochs: vec![0; vocab],
        })
    }

    pub fn vocab(&self) -> usize {
        self.ema_count.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.rows[v * self.dim..(v + 1) * self.dim]
    }

    /// Nearest row by squared distance; ties resolve to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> Result<usize, VqError> {
        if x.len() != self.dim {
            return Err(VqError::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for v in 0..self.vocab() {
            let row = self.row(v);
            let mut d = 0.0;
            for (a, b) in x.iter().zip(row) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        Ok(best)
    }

    /// Quantizes a `[G, T, C]` feature map into a token grid.
    pub fn quantize(&self, map: &Tensor, scale: usize) -> Result<TokenMap, VqError> {
        let (groups, t_len) = map_dims(map, self.dim)?;
        let mut ids = Vec::with_capacity(groups * t_len);
        for g in 0..groups {
            for t in 0..t_len {
                let v = self.nearest(feature(map, g, t))?;
                ids.push(v as u16);
            }
        }
        Ok(TokenMap {
            scale,
            groups,
            t_len,
            ids,
        })
    }

    /// Gathers rows back into a `[G, T, C]` map.
    pub fn lookup(&self, tokens: &TokenMap) -> Result<Tensor, VqError> {
        let mut out = Tensor::zeros(&[tokens.groups, tokens.t_len, self.dim]);
        for g in 0..tokens.groups {
            for t in 0..tokens.t_len {
                let v = tokens.id(g, t) as usize;
                if v >= self.vocab() {
                    return Err(VqError::TokenOutOfRange {
                        token: tokens.id(g, t),
                        vocab: self.vocab(),
                    });
                }
                let row = self.row(v);
                for c in 0..self.dim {
                    out.set3(g, t, c, row[c]);
                }
            }
        }
        Ok(out)
    }

    /// One EMA step over a batch of assigned features.
    ///
    /// `pre_quant` is the map that was quantized and `tokens` its assignment.
    /// Rows with no assignments keep their value exactly (sum and count decay
    /// by the same factor).
    pub fn ema_update(&mut self, pre_quant: &Tensor, tokens: &TokenMap) -> Result<(), VqError> {
        let (groups, t_len) = map_dims(pre_quant, self.dim)?;
        if groups != tokens.groups || t_len != tokens.t_len {
            return Err(VqError::ShapeMismatch {
                expected: vec![tokens.groups, tokens.t_len, self.dim],
                found: pre_quant.shape().to_vec(),
            });
        }
        let vocab = self.vocab();
        let mut batch_count = vec![0.0f64; vocab];
        let mut batch_sum = vec![0.0f64; vocab * self.dim];
        for g in 0..groups {
            for t in 0..t_len {
                let v = tokens.id(g, t) as usize;
                if v >= vocab {
                    return Err(VqError::TokenOutOfRange {
                        token: tokens.id(g, t),
                        vocab,
                    });
                }
                batch_count[v] += 1.0;
                self.epoch_usage[v] += 1;
                let x = feature(pre_quant, g, t);
                for c in 0..self.dim {
                    batch_sum[v * self.dim + c] += x[c];
                }
            }
        }
        for v in 0..vocab {
            self.ema_count[v] = EMA_DECAY * self.ema_count[v] + (1.0 - EMA_DECAY) * batch_count[v];
            for c in 0..self.dim {
                let i = v * self.dim + c;
                self.ema_sum[i] = EMA_DECAY * self.ema_sum[i] + (1.0 - EMA_DECAY) * batch_sum[i];
                self.rows[i] = self.ema_sum[i] / self.ema_count[v];
            }
        }
        Ok(())
    }

    /// Closes an epoch: reseeds rows unused for `RESEED_AFTER_EPOCHS`
    /// consecutive epochs from random features in `pool` (a `[.., C]`
    /// collection flattened row-major). Returns the reseeded row indices.
    pub fn end_epoch(&mut self, pool: &[f64], rng: &mut StreamRng) -> Result<Vec<usize>, VqError> {
        if pool.is_empty() || pool.len() % self.dim != 0 {
            return Err(VqError::DimMismatch {
                expected: self.dim,
                found: pool.len() % self.dim,
            });
        }
        let n_pool = pool.len() / self.dim;
        let mut reseeded = Vec::new();
        for v in 0..self.vocab() {
            if self.epoch_usage[v] == 0 {
                self.stale_epochs[v] += 1;
            } else {
                self.stale_epochs[v] = 0;
            }
            self.epoch_usage[v] = 0;
            if self.stale_epochs[v] >= RESEED_AFTER_EPOCHS {
                let pick = rng.gen_index(n_pool);
                let src = &pool[pick * self.dim..(pick + 1) * self.dim];
                for c in 0..self.dim {
                    let i = v * self.dim + c;
                    self.rows[i] = src[c];
                    self.ema_sum[i] = src[c];
                }
                self.ema_count[v] = 1.0;
                self.stale_epochs[v] = 0;
                reseeded.push(v);
            }
        }
        Ok(reseeded)
    }
}

fn map_dims(map: &Tensor, dim: usize) -> Result<(usize, usize), VqError> {
    let shape = map.shape();
    if shape.len() != 3 || shape[2] != dim {
        return Err(VqError::ShapeMismatch {
            expected: vec![0, 0, dim],
            found: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

fn feature(map: &Tensor, g: usize, t: usize) -> &[f64] {
    let c = map.shape()[2];
    let start = (g * map.shape()[1] + t) * c;
    &map.data()[start..start + c]
}

/// Per-scale refinement convolutions applied to upscaled quantized maps.
///
/// Each scale owns a kernel-3 conv over the patch axis (weights shared
/// across groups), initialized to the identity so a fresh quantizer
/// telescopes exactly.
pub struct RefineMaps {
    convs: Vec<Conv1d>,
    dim: usize,
}

impl RefineMaps {
    pub fn identity(n_scales: usize, dim: usize) -> Self {
        RefineMaps {
            convs: (0..n_scales).map(|_| Conv1d::new_identity(dim, 3)).collect(),
            dim,
        }
    }

    pub fn n_scales(&self) -> usize {
        self.convs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Applies φ_scale to a `[G, T, C]` map, convolving along T per group.
    pub fn apply(&mut self, scale: usize, map: &Tensor) -> Result<Tensor, VqError> {
        let (groups, t_len) = map_dims(map, self.dim)?;
        let conv = self
            .convs
            .get_mut(scale - 1)
            .ok_or(VqError::Format(format!("no refine map for scale {scale}")))?;
        let mut out = Tensor::zeros(&[groups, t_len, self.dim]);
        let mut xg = vec![0.0; self.dim * t_len];
        for g in 0..groups {
            for t in 0..t_len {
                for c in 0..self.dim {
                    xg[c * t_len + t] = map.at3(g, t, c);
                }
            }
            let y = conv.forward(&xg, t_len);
            for t in 0..t_len {
                for c in 0..self.dim {
                    out.set3(g, t, c, y[c * t_len + t]);
                }
            }
        }
        Ok(out)
    }

    /// Backward through the most recent `apply` for this scale; `d_out` is
    /// `[G, T, C]` and groups pop in reverse application order.
    pub fn backward(&mut self, scale: usize, d_out: &Tensor) -> Result<Tensor, VqError> {
        let (groups, t_len) = map_dims(d_out, self.dim)?;
        let conv = self
            .convs
            .get_mut(scale - 1)
            .ok_or(VqError::Format(format!("no refine map for scale {scale}")))?;
        let mut dx = Tensor::zeros(&[groups, t_len, self.dim]);
        let mut dyg = vec![0.0; self.dim * t_len];
        for g in (0..groups).rev() {
            for t in 0..t_len {
                for c in 0..self.dim {
                    dyg[c * t_len + t] = d_out.at3(g, t, c);
                }
            }
            let dxg = conv.backward(&dyg);
            for t in 0..t_len {
                for c in 0..self.dim {
                    dx.set3(g, t, c, dxg[c * t_len + t]);
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_caches(&mut self) {
        for c in &mut self.convs {
            c.clear_caches();
        }
    }
}

impl ParamVisitor for RefineMaps {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let prefix = format!("phi.{}.", i + 1);
            conv.visit_params(&mut |name, p| f(&format!("{prefix}{name}"), p));
        }
    }
}

/// Result of a residual multi-scale encode.
pub struct MultiScaleEncoding {
    /// One token map per selected scale, coarse to fine.
    pub tokens: MultiScaleTokens,
    /// The pooled residual each scale saw just before quantization.
    pub pre_quant: Vec<Tensor>,
    /// What remains of `f` after every scale's refined contribution.
    pub residual: Tensor,
}

/// Residual encode over the selected scales, coarse to fine: each scale
/// quantizes the pooled residual, then its refined broadcast is subtracted
/// before the next scale looks.
pub fn encode_multiscale(
    f: &Tensor,
    h: &Hierarchy,
    subset: &ScaleSubset,
    cb: &Codebook,
    phi: &mut RefineMaps,
) -> Result<MultiScaleEncoding, VqError> {
    let target = subset.target_scale();
    let mut residual = f.clone();
    let mut tokens = Vec::with_capacity(subset.len());
    let mut pre_quant = Vec::with_capacity(subset.len());
    for &s in subset.scales() {
        let z = downscale(&residual, h, target, s)?;
        let r = cb.quantize(&z, s)?;
        let broadcast = upscale(&cb.lookup(&r)?, h, s, target)?;
        let refined = phi.apply(s, &broadcast)?;
        for (r, d) in residual.data_mut().iter_mut().zip(refined.data()) {
            *r -= d;
        }
        tokens.push(r);
        pre_quant.push(z);
    }
    Ok(MultiScaleEncoding {
        tokens,
        pre_quant,
        residual,
    })
}

/// Sums each scale's refined broadcast back into a `[G_target, T, C]` map,
/// in the same coarse-to-fine order as encoding.
pub fn decode_multiscale(
    tokens: &[TokenMap],
    h: &Hierarchy,
    target_scale: usize,
    cb: &Codebook,
    phi: &mut RefineMaps,
) -> Result<Tensor, VqError> {
    if tokens.is_empty() {
        return Err(VqError::Format("no token maps to decode".into()));
    }
    let t_len = tokens[0].t_len;
    let mut out = Tensor::zeros(&[h.n_groups(target_scale), t_len, cb.dim()]);
    for r in tokens {
        let broadcast = upscale(&cb.lookup(r)?, h, r.scale, target_scale)?;
        let refined = phi.apply(r.scale, &broadcast)?;
        for (o, d) in out.data_mut().iter_mut().zip(refined.data()) {
            *o += d;
        }
    }
    Ok(out)
}

/// Commitment term `β · mean over (g, t) pairs of ‖z − sg(ẑ)‖²` and its
/// gradient with respect to `z`.
pub struct CommitLoss {
    pub value: f64,
    pub grad: Tensor,
}

pub fn commitment_loss(z: &Tensor, zq: &Tensor) -> Result<CommitLoss, VqError> {
    if z.shape() != zq.shape() || z.shape().len() != 3 {
        return Err(VqError::ShapeMismatch {
            expected: z.shape().to_vec(),
            found: zq.shape().to_vec(),
        });
    }
    let pairs = (z.shape()[0] * z.shape()[1]) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(z.shape());
    for (i, (a, b)) in z.data().iter().zip(zq.data()).enumerate() {
        let d = a - b;
        value += d * d;
        grad.data_mut()[i] = 2.0 * COMMITMENT_BETA * d / pairs;
    }
    Ok(CommitLoss {
        value: COMMITMENT_BETA * value / pairs,
        grad,
    })
}

/// Persists a codebook plus its refine maps: header, f32 rows, f32 conv
/// weights, sha256 trailer. EMA counters are not stored; loading restores
/// them to the fresh count-normalized state.
pub fn save_codebook(path: &Path, cb: &Codebook, phi: &RefineMaps) -> Result<(), VqError> {
    let mut body = Vec::new();
    body.extend_from_slice(CODEBOOK_MAGIC);
    body.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    body.extend_from_slice(&(cb.vocab() as u32).to_le_bytes());
    body.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    body.extend_from_slice(&(phi.n_scales() as u32).to_le_bytes());
    for &x in &cb.rows {
        body.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for conv in &phi.convs {
        for &x in &conv.w.data {
            body.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &x in &conv.b.data {
            body.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    fs::write(path, body)?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<(Codebook, RefineMaps), VqError> {
    let raw = fs::read(path)?;
    if raw.len() < 52 {
        return Err(VqError::Format("file too short for a codebook".into()));
    }
    let (body, trailer) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(VqError::HashMismatch);
    }
    let mut r = ByteReader::new(body);
    let magic = r.take(4)?;
    if magic != CODEBOOK_MAGIC {
        return Err(VqError::Format("bad magic, not a codebook file".into()));
    }
    let version = r.u32()?;
    if version != CODEBOOK_VERSION {
        return Err(VqError::Format(format!("unsupported version {version}")));
    }
    let vocab = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n_phi = r.u32()? as usize;
    let mut rows = Vec::with_capacity(vocab * dim);
    for _ in 0..vocab * dim {
        rows.push(r.f32()? as f64);
    }
    let cb = Codebook::from_rows(dim, rows)?;
    let mut phi = RefineMaps::identity(n_phi, dim);
    for conv in &mut phi.convs {
        for x in conv.w.data.iter_mut() {
            *x = r.f32()? as f64;
        }
        for x in conv.b.data.iter_mut() {
            *x = r.f32()? as f64;
        }
    }
    if !r.at_end() {
        return Err(VqError::Format("trailing bytes after codebook".into()));
    }
    Ok((cb, phi))
}

/// Tokenized windows on disk: header describing the grid, then one 7-byte
/// record per token `(t: u16, scale: u8, group: u16, token: u16)` in
/// lexicographic `(t, scale, group)` order per window.
pub struct TokenFile {
    pub montage_hash: u64,
    pub t_len: usize,
    /// `(scale, groups)` pairs, coarse to fine.
    pub grid: Vec<(usize, usize)>,
    pub windows: Vec<MultiScaleTokens>,
}

pub fn write_tokens(
    path: &Path,
    montage_hash: u64,
    windows: &[MultiScaleTokens],
) -> Result<(), VqError> {
    let first = windows
        .first()
        .ok_or(VqError::Format("no windows to write".into()))?;
    if first.is_empty() {
        return Err(VqError::Format("window has no token maps".into()));
    }
    let t_len = first[0].t_len;
    let grid: Vec<(usize, usize)> = first.iter().map(|m| (m.scale, m.groups)).collect();
    for w in windows {
        let got: Vec<(usize, usize)> = w.iter().map(|m| (m.scale, m.groups)).collect();
        if got != grid || w.iter().any(|m| m.t_len != t_len) {
            return Err(VqError::Format("inconsistent token grids across windows".into()));
        }
    }
    let mut body = Vec::new();
    body.extend_from_slice(TOKENS_MAGIC);
    body.extend_from_slice(&TOKENS_VERSION.to_le_bytes());
    body.extend_from_slice(&montage_hash.to_le_bytes());
    body.extend_from_slice(&(t_len as u16).to_le_bytes());
    body.push(grid.len() as u8);
    for &(scale, groups) in &grid {
        body.push(scale as u8);
        body.extend_from_slice(&(groups as u16).to_le_bytes());
    }
    body.extend_from_slice(&(windows.len() as u32).to_le_bytes());
    for w in windows {
        for t in 0..t_len {
            for m in w {
                for g in 0..m.groups {
                    body.extend_from_slice(&(t as u16).to_le_bytes());
                    body.push(m.scale as u8);
                    body.extend_from_slice(&(g as u16).to_le_bytes());
                    body.extend_from_slice(&m.id(g, t).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<TokenFile, VqError> {
    let raw = fs::read(path)?;
    let mut r = ByteReader::new(&raw);
    let magic = r.take(4)?;
    if magic != TOKENS_MAGIC {
        return Err(VqError::Format("bad magic, not a token file".into()));
    }
    let version = r.u32()?;
    if version != TOKENS_VERSION {
        return Err(VqError::Format(format!("unsupported version {version}")));
    }
    let montage_hash = r.u64()?;
    let t_len = r.u16()? as usize;
    let n_scales = r.u8()? as usize;
    let mut grid = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        let scale = r.u8()? as usize;
        let groups = r.u16()? as usize;
        grid.push((scale, groups));
    }
    let n_windows = r.u32()? as usize;
    let mut windows = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let mut maps: MultiScaleTokens = grid
            .iter()
            .map(|&(scale, groups)| TokenMap {
                scale,
                groups,
                t_len,
                ids: vec![0; groups * t_len],
            })
            .collect();
        for t in 0..t_len {
            for (mi, &(scale, groups)) in grid.iter().enumerate() {
                for g in 0..groups {
                    let rt = r.u16()? as usize;
                    let rs = r.u8()? as usize;
                    let rg = r.u16()? as usize;
                    let id = r.u16()?;
                    if rt != t || rs != scale || rg != g {
                        return Err(VqError::Format(format!(
                            "record order broken at (t={rt}, scale={rs}, group={rg})"
                        )));
                    }
                    maps[mi].ids[g * t_len + t] = id;
                }
            }
        }
        windows.push(maps);
    }
    if !r.at_end() {
        return Err(VqError::Format("trailing bytes after token records".into()));
    }
    Ok(TokenFile {
        montage_hash,
        t_len,
        grid,
        windows,
    })
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], VqError> {
        if self.pos + n > self.buf.len() {
            return Err(VqError::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, VqError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, VqError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, VqError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, VqError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, VqError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bth::builtin_hierarchy;
    use proptest::prelude::*;

    fn book(dim: usize, rows: &[f64]) -> Codebook {
        Codebook::from_rows(dim, rows.to_vec()).unwrap()
    }

    #[test]
    fn nearest_picks_the_closer_row() {
        let cb = book(2, &[0.0, 0.0, 1.0, 1.0]);
        // distances 0.02 vs 1.62
        assert_eq!(cb.nearest(&[0.1, 0.1]).unwrap(), 0);
    }

    #[test]
    fn nearest_breaks_ties_toward_the_lowest_index() {
        let cb = book(1, &[1.0, -1.0]);
        assert_eq!(cb.nearest(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn quantizing_a_codebook_row_is_a_fixed_point() {
        let cb = Codebook::new(16, 4, 7).unwrap();
        for v in 0..cb.vocab() {
            assert_eq!(cb.nearest(cb.row(v)).unwrap(), v);
        }
    }

    proptest! {
        #[test]
        fn quantize_matches_an_exhaustive_scan(
            vocab in 1usize..=64,
            dim in 1usize..=8,
            seed in any::<u64>(),
        ) {
            let mut rng = StreamRng::new(seed, "test/scan");
            let rows = rng.normal_vec(vocab * dim, 1.0);
            let cb = book(dim, &rows);
            for _ in 0..8 {
                let x = rng.normal_vec(dim, 1.0);
                // independent scan: track best (distance, index) explicitly
                let mut oracle = (f64::INFINITY, usize::MAX);
                for v in (0..vocab).rev() {
                    let d: f64 = x
                        .iter()
                        .zip(cb.row(v))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d <= oracle.0 {
                        oracle = (d, v);
                    }
                }
                prop_assert_eq!(cb.nearest(&x).unwrap(), oracle.1);
            }
        }
    }

    #[test]
    fn lookup_gathers_rows_by_token() {
        let cb = Codebook::new(8, 3, 3).unwrap();
        let map = Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.1 - 0.4);
        let tokens = cb.quantize(&map, 1).unwrap();
        let rec = cb.lookup(&tokens).unwrap();
        for g in 0..2 {
            for t in 0..2 {
                let row = cb.row(tokens.id(g, t) as usize);
                for c in 0..3 {
                    assert_eq!(rec.at3(g, t, c), row[c]);
                }
            }
        }
    }

    #[test]
    fn finest_only_encode_degenerates_to_plain_quantize() {
        let h = builtin_hierarchy("test8").unwrap();
        let cb = Codebook::new(32, 4, 11).unwrap();
        let mut phi = RefineMaps::identity(h.n_scales(), 4);
        let f = Tensor::from_fn(&[8, 5, 4], |i| ((i * 37) % 17) as f64 * 0.13 - 1.0);
        let subset = ScaleSubset::new(vec![4], &h).unwrap();
        let enc = encode_multiscale(&f, &h, &subset, &cb, &mut phi).unwrap();
        assert_eq!(enc.tokens.len(), 1);
        let plain = cb.quantize(&f, 4).unwrap();
        assert_eq!(enc.tokens[0], plain);
    }

    #[test]
    fn broadcast_row_is_captured_at_the_coarsest_scale() {
        let h = builtin_hierarchy("test8").unwrap();
        // row 1 is large, row 0 is the zero row
        let rows = vec![0.0, 0.0, 5.0, -3.0];
        let cb = book(2, &rows);
        let mut phi = RefineMaps::identity(h.n_scales(), 2);
        let f = Tensor::from_fn(&[8, 2, 2], |i| if i % 2 == 0 { 5.0 } else { -3.0 });
        let subset = ScaleSubset::new(vec![1, 4], &h).unwrap();
        let enc = encode_multiscale(&f, &h, &subset, &cb, &mut phi).unwrap();
        assert!(enc.tokens[0].ids.iter().all(|&v| v == 1), "coarse scale takes the row");
        assert!(enc.tokens[1].ids.iter().all(|&v| v == 0), "residual is zero-nearest");
        assert!(enc.residual.data().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn planted_tiered_tokens_decode_exactly() {
        let h = builtin_hierarchy("test8").unwrap();
        let dim = 3;
        // magnitude-separated tiers: rows 0-1 coarse, 2-3 mid, 4-5 fine, 6 zero
        let rows = vec![
            24.0, -16.0, 8.0, //
            -24.0, 16.0, -8.0, //
            3.0, 2.0, -1.0, //
            -2.0, -3.0, 1.0, //
            0.25, -0.125, 0.0625, //
            -0.25, 0.125, -0.0625, //
            0.0, 0.0, 0.0,
        ];
        let cb = book(dim, &rows);
        let mut phi = RefineMaps::identity(h.n_scales(), dim);
        let subset = ScaleSubset::new(vec![1, 3, 4], &h).unwrap();
        let mut rng = StreamRng::new(41, "test/plant");
        let t_len = 2;
        // plant one tier per scale: coarse from {0,1}, mid {2,3}, fine {4,5}
        let planted: Vec<TokenMap> = subset
            .scales()
            .iter()
            .zip([[0u16, 1], [2, 3], [4, 5]])
            .map(|(&scale, tier)| {
                let groups = h.n_groups(scale);
                TokenMap {
                    scale,
                    groups,
                    t_len,
                    ids: (0..groups * t_len).map(|_| tier[rng.gen_index(2)]).collect(),
                }
            })
            .collect();
        let f = decode_multiscale(&planted, &h, 4, &cb, &mut phi).unwrap();
        let enc = encode_multiscale(&f, &h, &subset, &cb, &mut phi).unwrap();
        assert_eq!(enc.tokens, planted);
        let rec = decode_multiscale(&enc.tokens, &h, 4, &cb, &mut phi).unwrap();
        for (a, b) in rec.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn telescoping_residual_identity_holds_with_trained_refine_maps() {
        let h = builtin_hierarchy("seed62").unwrap();
        let dim = 4;
        let cb = Codebook::new(24, dim, 13).unwrap();
        let mut phi = RefineMaps::identity(h.n_scales(), dim);
        // perturb the refine maps so the identity is not trivial
        let mut rng = StreamRng::new(99, "test/phi-jitter");
        phi.visit_params(&mut |_, p| {
            for w in p.data.iter_mut() {
                *w += rng.normal() * 0.05;
            }
        });
        let f = Tensor::from_fn(&[62, 3, dim], |i| ((i * 31 + 7) % 23) as f64 * 0.09 - 1.0);
        let subset = ScaleSubset::new(vec![1, 2, 4, 5], &h).unwrap();
        let enc = encode_multiscale(&f, &h, &subset, &cb, &mut phi).unwrap();
        let dec = decode_multiscale(&enc.tokens, &h, 5, &cb, &mut phi).unwrap();
        for i in 0..f.len() {
            let lhs = f.data()[i];
            let rhs = dec.data()[i] + enc.residual.data()[i];
            assert!((lhs - rhs).abs() < 1e-10, "at {i}: {lhs} vs {rhs}");
        }
    }

    proptest! {
        // With the zero row available and identity refine maps, every scale's
        // greedy step can only shrink the residual, so the full subset never
        // reconstructs worse than quantizing the finest scale alone.
        #[test]
        fn full_subset_never_loses_to_finest_only_on_tiered_rows(seed in any::<u64>()) {
            let h = builtin_hierarchy("test8").unwrap();
            let dim = 3;
            let mut rng = StreamRng::new(seed, "test/tiered");
            // tier A: well separated coarse rows; tier B: small rows + exact zero
            let mut rows = Vec::new();
            for k in 0..4 {
                for c in 0..dim {
                    rows.push(8.0 * ((k + c) % 3) as f64 - 8.0);
                }
            }
            rows.extend(rng.normal_vec(4 * dim, 0.1));
            rows.extend(std::iter::repeat(0.0).take(dim));
            let cb = book(dim, &rows);
            let mut phi = RefineMaps::identity(h.n_scales(), dim);
            let base = rng.gen_index(4);
            let f = Tensor::from_fn(&[8, 2, dim], |i| {
                cb.row(base)[i % dim] + rng.uniform_range(-0.25, 0.25)
            });
            let full = ScaleSubset::full(&h);
            let enc = encode_multiscale(&f, &h, &full, &cb, &mut phi).unwrap();
            let err_full: f64 = enc.residual.data().iter().map(|r| r * r).sum();
            let fo = cb.lookup(&cb.quantize(&f, 4).unwrap()).unwrap();
            let err_fo: f64 = f
                .data()
                .iter()
                .zip(fo.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            prop_assert!(
                err_full <= err_fo + 1e-9,
                "full {} vs finest-only {}",
                err_full,
                err_fo
            );
        }
    }

    #[test]
    fn ema_step_matches_the_scalar_hand_computation() {
        let mut cb = book(1, &[2.0, 10.0]);
        let z = Tensor::from_vec(&[1, 1, 1], vec![3.0]);
        let tokens = cb.quantize(&z, 1).unwrap();
        assert_eq!(tokens.ids, vec![0]);
        cb.ema_update(&z, &tokens).unwrap();
        // count 0.99*1+0.01 = 1, sum 0.99*2+0.01*3 = 2.01
        assert!((cb.row(0)[0] - 2.01).abs() < 1e-12);
        assert_eq!(cb.row(1)[0], 10.0, "unassigned rows keep their value exactly");
    }

    #[test]
    fn dead_rows_reseed_after_two_idle_epochs() {
        let mut cb = book(1, &[0.0, 50.0, -50.0]);
        let pool = vec![7.0, 8.0, 9.0];
        let mut rng = StreamRng::new(5, "test/reseed");
        for epoch in 0..2 {
            let z = Tensor::from_vec(&[2, 1, 1], vec![0.1, -0.1]);
            let tokens = cb.quantize(&z, 1).unwrap();
            assert!(tokens.ids.iter().all(|&v| v == 0));
            cb.ema_update(&z, &tokens).unwrap();
            let reseeded = cb.end_epoch(&pool, &mut rng).unwrap();
            if epoch == 0 {
                assert!(reseeded.is_empty(), "one idle epoch is not enough");
            } else {
                assert_eq!(reseeded, vec![1, 2]);
                for &v in &reseeded {
                    assert!(pool.contains(&cb.row(v)[0]), "row {v} -> {}", cb.row(v)[0]);
                }
            }
        }
    }

    #[test]
    fn commitment_loss_and_gradient_match_hand_values() {
        let z = Tensor::from_fn(&[2, 3, 4], |_| 1.0);
        let zq = Tensor::zeros(&[2, 3, 4]);
        let out = commitment_loss(&z, &zq).unwrap();
        // each of the 6 pairs contributes squared norm 4
        assert!((out.value - 0.25 * 4.0).abs() < 1e-12);
        for &g in out.grad.data() {
            assert!((g - 2.0 * 0.25 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_map_gradients_agree_with_finite_differences() {
        use crate::nn::grad_check;
        let mut phi = RefineMaps::identity(2, 3);
        let x = Tensor::from_fn(&[4, 5, 3], |i| ((i * 13) % 11) as f64 * 0.2 - 1.0);
        let report = grad_check(
            &mut phi,
            |m| {
                m.zero_grads();
                let y = m.apply(2, &x).unwrap();
                let loss = 0.5 * y.data().iter().map(|v| v * v).sum::<f64>();
                m.backward(2, &y).unwrap();
                loss
            },
            1e-5,
            6,
            17,
        );
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
    }

    #[test]
    fn codebook_file_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.bin");
        let cb = Codebook::new(16, 4, 21).unwrap();
        let mut phi = RefineMaps::identity(3, 4);
        let mut rng = StreamRng::new(8, "test/phi");
        phi.visit_params(&mut |_, p| {
            for w in p.data.iter_mut() {
                *w += rng.normal() * 0.1;
            }
        });
        save_codebook(&path, &cb, &phi).unwrap();
        let (cb2, mut phi2) = load_codebook(&path).unwrap();
        assert_eq!(cb2.vocab(), 16);
        assert_eq!(cb2.dim(), 4);
        for v in 0..16 {
            for c in 0..4 {
                assert_eq!(cb2.row(v)[c], cb.row(v)[c] as f32 as f64);
            }
        }
        let mut want = Vec::new();
        phi.visit_params(&mut |name, p| {
            want.push((name.to_string(), p.data.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>()))
        });
        let mut got = Vec::new();
        phi2.visit_params(&mut |name, p| got.push((name.to_string(), p.data.clone())));
        assert_eq!(want, got);
    }

    #[test]
    fn corrupted_codebook_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.bin");
        let cb = Codebook::new(4, 2, 1).unwrap();
        let phi = RefineMaps::identity(1, 2);
        save_codebook(&path, &cb, &phi).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x40;
        fs::write(&path, &raw).unwrap();
        assert!(matches!(load_codebook(&path), Err(VqError::HashMismatch)));
    }

    fn sample_windows(h: &Hierarchy, t_len: usize, n: usize) -> Vec<MultiScaleTokens> {
        let mut rng = StreamRng::new(31, "test/windows");
        (0..n)
            .map(|_| {
                (1..=h.n_scales())
                    .map(|scale| {
                        let groups = h.n_groups(scale);
                        TokenMap {
                            scale,
                            groups,
                            t_len,
                            ids: (0..groups * t_len).map(|_| rng.gen_index(40) as u16).collect(),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn token_file_roundtrip_preserves_every_record() {
        let h = builtin_hierarchy("test8").unwrap();
        let windows = sample_windows(&h, 5, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tok");
        write_tokens(&path, 0xfeed, &windows).unwrap();
        let tf = read_tokens(&path).unwrap();
        assert_eq!(tf.montage_hash, 0xfeed);
        assert_eq!(tf.t_len, 5);
        assert_eq!(tf.grid, vec![(1, 1), (2, 2), (3, 4), (4, 8)]);
        assert_eq!(tf.windows, windows);
        // 15 groups across scales, 5 patches -> 75 records of 7 bytes per window
        let header = 4 + 4 + 8 + 2 + 1 + 3 * 4 + 4;
        assert_eq!(
            fs::metadata(&path).unwrap().len() as usize,
            header + 2 * 75 * 7
        );
    }

    #[test]
    fn token_records_use_the_packed_field_layout() {
        let h = builtin_hierarchy("test8").unwrap();
        let mut windows = sample_windows(&h, 2, 1);
        windows[0][0].ids[0] = 0x0201;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tok");
        write_tokens(&path, 1, &windows).unwrap();
        let raw = fs::read(&path).unwrap();
        let header = 4 + 4 + 8 + 2 + 1 + 3 * 4 + 4;
        // (t=0, scale=1, group=0, token=0x0201) little-endian packed
        assert_eq!(&raw[header..header + 7], &[0, 0, 1, 0, 0, 0x01, 0x02]);
    }

    #[test]
    fn reordered_token_records_are_rejected() {
        let h = builtin_hierarchy("test8").unwrap();
        let windows = sample_windows(&h, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tok");
        write_tokens(&path, 1, &windows).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let header = 4 + 4 + 8 + 2 + 1 + 3 * 4 + 4;
        // swap the first two records
        let (a, b) = (header, header + 7);
        for i in 0..7 {
            raw.swap(a + i, b + i);
        }
        fs::write(&path, &raw).unwrap();
        assert!(matches!(read_tokens(&path), Err(VqError::Format(_))));
    }
}
