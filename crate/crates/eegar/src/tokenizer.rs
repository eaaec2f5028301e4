//! THVQ-VAE assembly and training: patch encoder, multi-scale quantization,
//! dual reconstruction decoders, compound loss, and the domain schedule.
//!
//! Loss reduction convention, recorded in every report header: sum over
//! elements within an item, mean over batch items. The commitment term is
//! the vq module's per-pair mean, summed over selected scales.

use thiserror::Error;

use crate::bth::{builtin_hierarchy, upscale, BthError, Hierarchy, ScaleSubset};
use crate::dsp::{patchify, DspError, PatchGrid};
use crate::nn::{
    dft_magnitude, dft_magnitude_len, AdamW, AdamWConfig, AttnMask, Linear, LrSchedule, Param,
    ParamVisitor, StreamRng, TemporalEncoder, Tensor, TransformerStack,
};
use crate::signalio::{DatasetManifest, SignalError, Split};
use crate::vq::{commitment_loss, Codebook, RefineMaps, TokenMap, VqError};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("manifest has no {0} segments")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Hierarchy(#[from] BthError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Domain weight `λ = 2 / (1 + e^{-10·step/total}) - 1`, rising from 0
/// toward 1 over the run.
pub fn lambda_at(step: usize, total_steps: usize) -> Result<f64, TokenizerError> {
    if total_steps == 0 {
        return Err(TokenizerError::EmptySchedule);
    }
    if step > total_steps {
        return Err(TokenizerError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let p = step as f64 / total_steps as f64;
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// The λ ramp pinned to one run's step count.
#[derive(Debug, Clone, Copy)]
pub struct LambdaSchedule {
    total_steps: usize,
}

impl LambdaSchedule {
    pub fn new(total_steps: usize) -> Result<Self, TokenizerError> {
        if total_steps == 0 {
            return Err(TokenizerError::EmptySchedule);
        }
        Ok(LambdaSchedule { total_steps })
    }

    pub fn at(&self, step: usize) -> Result<f64, TokenizerError> {
        lambda_at(step, self.total_steps)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// Pearson correlation over two pooled sample sets; 0 when either side has
/// no variance (or fewer than two samples).
pub fn pcc(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pcc needs equal lengths");
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Per-channel decoder: a window's feature row `[T, C]` in, `[T, out_len]`
/// out, with full attention across the T patch positions.
pub struct PatchDecoder {
    t_len: usize,
    in_dim: usize,
    out_len: usize,
    proj_in: Linear,
    pos: Param,
    stack: TransformerStack,
    proj_out: Linear,
    mask: AttnMask,
}

impl PatchDecoder {
    pub fn new(
        t_len: usize,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        mlp: usize,
        out_len: usize,
        rng: &mut StreamRng,
    ) -> Self {
        PatchDecoder {
            t_len,
            in_dim,
            out_len,
            proj_in: Linear::new(in_dim, hidden, rng),
            pos: Param::new_no_decay(rng.normal_vec(t_len * hidden, 0.02)),
            stack: TransformerStack::new(layers, hidden, heads, mlp, rng),
            proj_out: Linear::new(hidden, out_len, rng),
            mask: AttnMask::full(t_len),
        }
    }

    pub fn forward(&mut self, fm: &[f64]) -> Vec<f64> {
        assert_eq!(fm.len(), self.t_len * self.in_dim);
        let mut x = self.proj_in.forward(fm);
        for (xi, pi) in x.iter_mut().zip(&self.pos.data) {
            *xi += pi;
        }
        let h = self.stack.forward(&x, &self.mask);
        self.proj_out.forward(&h)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        assert_eq!(dy.len(), self.t_len * self.out_len);
        let dh = self.proj_out.backward(dy);
        let dx = self.stack.backward(&dh);
        for (g, d) in self.pos.grad.iter_mut().zip(&dx) {
            *g += d;
        }
        self.proj_in.backward(&dx)
    }

    pub fn clear_caches(&mut self) {
        self.proj_in.clear_caches();
        self.stack.clear_caches();
        self.proj_out.clear_caches();
    }
}

impl ParamVisitor for PatchDecoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj_in
            .visit_params(&mut |name, p| f(&format!("proj_in.{name}"), p));
        f("pos", &mut self.pos);
        self.stack
            .visit_params(&mut |name, p| f(&format!("stack.{name}"), p));
        self.proj_out
            .visit_params(&mut |name, p| f(&format!("proj_out.{name}"), p));
    }
}

/// Two-class domain head behind gradient reversal, with a frozen random
/// character embedding standing in for the text domain.
pub struct DomainBranch {
    pub head: Linear,
    text_table: Vec<f64>,
    code_dim: usize,
}

const TEXT_CHARS: usize = 96;
const TEXT_LEN: usize = 24;

impl DomainBranch {
    pub fn new(code_dim: usize, rng: &mut StreamRng) -> Self {
        DomainBranch {
            head: Linear::new(code_dim, 2, rng),
            text_table: rng.normal_vec(TEXT_CHARS * code_dim, 1.0),
            code_dim,
        }
    }

    /// Mean embedding of a pseudo-text sample drawn from `rng`.
    fn sample_text_feature(&self, rng: &mut StreamRng) -> Vec<f64> {
        let mut mean = vec![0.0; self.code_dim];
        for _ in 0..TEXT_LEN {
            let ch = rng.gen_index(TEXT_CHARS);
            for c in 0..self.code_dim {
                mean[c] += self.text_table[ch * self.code_dim + c] / TEXT_LEN as f64;
            }
        }
        mean
    }
}

impl ParamVisitor for DomainBranch {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head
            .visit_params(&mut |name, p| f(&format!("head.{name}"), p));
    }
}

/// The assembled THVQ-VAE.
pub struct TokenizerModel {
    pub hierarchy: Hierarchy,
    pub subset: ScaleSubset,
    pub encoder: TemporalEncoder,
    pub codebook: Codebook,
    pub phi: RefineMaps,
    pub time_dec: PatchDecoder,
    pub freq_dec: PatchDecoder,
    pub domain: Option<DomainBranch>,
    pub patch_len: usize,
    pub t_len: usize,
}

/// Architecture and optimization knobs for one tokenizer run.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub montage: String,
    pub scales: Vec<usize>,
    pub window: usize,
    pub patch: usize,
    pub vocab: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub domain_branch: bool,
    pub seed: u64,
}

impl TokenizerModel {
    pub fn new(p: &TrainParams) -> Result<Self, TokenizerError> {
        let hierarchy = builtin_hierarchy(&p.montage)?;
        Self::with_hierarchy(p, hierarchy)
    }

    /// Same as `new` but with an explicit hierarchy (custom schemes).
    pub fn with_hierarchy(p: &TrainParams, hierarchy: Hierarchy) -> Result<Self, TokenizerError> {
        let subset = ScaleSubset::new(p.scales.clone(), &hierarchy)?;
        let t_len = p.window / p.patch;
        let mut enc_rng = StreamRng::new(p.seed, "tokenizer/encoder");
        let mut time_rng = StreamRng::new(p.seed, "tokenizer/time-dec");
        let mut freq_rng = StreamRng::new(p.seed, "tokenizer/freq-dec");
        let encoder = TemporalEncoder::new(
            p.patch,
            p.hidden,
            p.enc_layers,
            p.heads,
            p.mlp,
            p.code_dim,
            &mut enc_rng,
        );
        let time_dec = PatchDecoder::new(
            t_len,
            p.code_dim,
            p.hidden,
            p.dec_layers,
            p.heads,
            p.mlp,
            p.patch,
            &mut time_rng,
        );
        let freq_dec = PatchDecoder::new(
            t_len,
            p.code_dim,
            p.hidden,
            p.dec_layers,
            p.heads,
            p.mlp,
            dft_magnitude_len(p.patch),
            &mut freq_rng,
        );
        let codebook = Codebook::new(p.vocab, p.code_dim, p.seed)?;
        let phi = RefineMaps::identity(hierarchy.n_scales(), p.code_dim);
        let domain = p.domain_branch.then(|| {
            let mut rng = StreamRng::new(p.seed, "tokenizer/domain");
            DomainBranch::new(p.code_dim, &mut rng)
        });
        Ok(TokenizerModel {
            hierarchy,
            subset,
            encoder,
            codebook,
            phi,
            time_dec,
            freq_dec,
            domain,
            patch_len: p.patch,
            t_len,
        })
    }

    /// Encodes every (channel, patch) of a `[N, T, P]` window into `[N, T, C]`.
    pub fn encode_window(&mut self, window: &Tensor) -> Tensor {
        let (n, t, p) = (window.shape()[0], window.shape()[1], window.shape()[2]);
        assert_eq!(p, self.patch_len);
        let c = self.encoder.out_dim();
        let mut f = Tensor::zeros(&[n, t, c]);
        for g in 0..n {
            for ti in 0..t {
                let start = (g * t + ti) * p;
                let feat = self.encoder.forward(&window.data()[start..start + p]);
                for (ci, &v) in feat.iter().enumerate() {
                    f.set3(g, ti, ci, v);
                }
            }
        }
        f
    }

    /// Tokenizes one window without touching training state.
    pub fn tokenize_window(&mut self, window: &Tensor) -> Result<Vec<TokenMap>, TokenizerError> {
        let f = self.encode_window(window);
        let enc = crate::vq::encode_multiscale(
            &f,
            &self.hierarchy,
            &self.subset,
            &self.codebook,
            &mut self.phi,
        )?;
        self.clear_caches();
        Ok(enc.tokens)
    }

    /// Discards layer caches left behind by forward-only passes.
    pub fn clear_caches(&mut self) {
        self.encoder.clear_caches();
        self.phi.clear_caches();
        self.time_dec.clear_caches();
        self.freq_dec.clear_caches();
        if let Some(d) = self.domain.as_mut() {
            d.head.clear_caches();
        }
    }
}

impl ParamVisitor for TokenizerModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder
            .visit_params(&mut |name, p| f(&format!("encoder.{name}"), p));
        self.phi.visit_params(&mut |name, p| f(&format!("{name}"), p));
        self.time_dec
            .visit_params(&mut |name, p| f(&format!("time_dec.{name}"), p));
        self.freq_dec
            .visit_params(&mut |name, p| f(&format!("freq_dec.{name}"), p));
        if let Some(d) = self.domain.as_mut() {
            d.visit_params(&mut |name, p| f(&format!("domain.{name}"), p));
        }
    }
}

/// Per-term loss breakdown of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub time: f64,
    pub freq: f64,
    pub commit: f64,
    pub domain: f64,
}

/// One window of training data: patches plus its padding grid.
pub struct WindowItem {
    pub patches: Tensor,
    pub grid: PatchGrid,
}

/// Patch indices of a grid that carry no padding (uniform across channels).
fn unpadded_patches(grid: &PatchGrid) -> Vec<usize> {
    (0..grid.n_patches)
        .filter(|&t| (0..grid.n_channels).all(|ch| !grid.padded(ch, t)))
        .collect()
}

/// Training-step byproducts a caller may want beyond the losses.
struct StepTrace {
    terms: LossTerms,
    // per window, per scale: (pre-quant map, tokens) over unpadded patches
    ema_pairs: Vec<Vec<(Tensor, TokenMap)>>,
    // encoder features over unpadded patches, flattened [C] rows
    feature_pool: Vec<f64>,
}

/// Forward + backward over a batch at fixed `lambda`; parameter gradients
/// are accumulated, optimizer and EMA updates are the caller's business.
fn batch_step(
    model: &mut TokenizerModel,
    batch: &[&WindowItem],
    lambda: f64,
    domain_rng: &mut StreamRng,
) -> Result<StepTrace, TokenizerError> {
    assert!(!batch.is_empty());
    let n_batch = batch.len() as f64;
    let code_dim = model.codebook.dim();
    let mut terms = LossTerms::default();
    let mut ema_pairs = Vec::with_capacity(batch.len());
    let mut feature_pool = Vec::new();

    // per-window forward state consumed by the reverse pass
    struct WindowState {
        n: usize,
        t: usize,
        live: Vec<usize>,
        d_time_out: Vec<f64>,
        d_freq_out: Vec<f64>,
        commit_grads: Vec<Tensor>,
        pooled_grad: Option<Vec<f64>>,
    }
    let mut states: Vec<WindowState> = Vec::with_capacity(batch.len());

    for item in batch {
        let (n, t) = (item.patches.shape()[0], item.patches.shape()[1]);
        let live = unpadded_patches(&item.grid);
        let f = model.encode_window(&item.patches);
        let enc = crate::vq::encode_multiscale(
            &f,
            &model.hierarchy,
            &model.subset,
            &model.codebook,
            &mut model.phi,
        )?;
        // telescoping: the quantizer's reconstruction is f minus what is left
        let mut f_hat = f.clone();
        for (fh, r) in f_hat.data_mut().iter_mut().zip(enc.residual.data()) {
            *fh -= r;
        }

        // commitment per scale over unpadded patches; the same slices feed
        // the caller's EMA update
        let mut commit_grads = Vec::with_capacity(enc.pre_quant.len());
        let mut pairs = Vec::with_capacity(enc.pre_quant.len());
        for (z, tok) in enc.pre_quant.iter().zip(&enc.tokens) {
            let zq = model.codebook.lookup(tok)?;
            let zl = slice_patches(z, &live);
            let zql = slice_patches(&zq, &live);
            if zl.shape()[1] == 0 {
                commit_grads.push(Tensor::zeros(z.shape()));
            } else {
                let cl = commitment_loss(&zl, &zql)?;
                terms.commit += cl.value / n_batch;
                commit_grads.push(unslice_patches(&cl.grad, &live, z.shape()[1], 1.0 / n_batch));
            }
            pairs.push((zl, slice_tokens(tok, &live)));
        }
        ema_pairs.push(pairs);

        // reconstruction losses over unpadded (channel, patch) cells
        let mut d_time_out = vec![0.0; n * t * model.patch_len];
        let mut d_freq_out = vec![0.0; n * t * dft_magnitude_len(model.patch_len)];
        let flen = dft_magnitude_len(model.patch_len);
        let mut time_outs = Vec::with_capacity(n);
        let mut freq_outs = Vec::with_capacity(n);
        for g in 0..n {
            let fh = &f_hat;
            let row: Vec<f64> = (0..t)
                .flat_map(|ti| (0..code_dim).map(move |c| fh.at3(g, ti, c)))
                .collect();
            time_outs.push(model.time_dec.forward(&row));
            freq_outs.push(model.freq_dec.forward(&row));
        }
        for g in 0..n {
            for &ti in &live {
                let ps = (g * t + ti) * model.patch_len;
                let patch = &item.patches.data()[ps..ps + model.patch_len];
                let pred = &time_outs[g][ti * model.patch_len..(ti + 1) * model.patch_len];
                for k in 0..model.patch_len {
                    let d = pred[k] - patch[k];
                    terms.time += d * d / n_batch;
                    d_time_out[ps + k] = 2.0 * d / n_batch;
                }
                let spec = dft_magnitude(patch);
                let fpred = &freq_outs[g][ti * flen..(ti + 1) * flen];
                for k in 0..flen {
                    let d = fpred[k] - spec[k];
                    terms.freq += d * d / n_batch;
                    d_freq_out[(g * t + ti) * flen + k] = 2.0 * d / n_batch;
                }
            }
        }

        // domain branch: EEG features vs a pseudo-text sample
        let mut pooled_grad = None;
        if let Some(branch) = model.domain.as_mut() {
            if !live.is_empty() {
                let cells = (n * live.len()) as f64;
                let mut pooled = vec![0.0; code_dim];
                for g in 0..n {
                    for &ti in &live {
                        for ci in 0..code_dim {
                            pooled[ci] += f.at3(g, ti, ci) / cells;
                        }
                    }
                }
                let text = branch.sample_text_feature(domain_rng);
                let (ce_eeg, d_eeg) = domain_ce(&mut branch.head, &pooled, 0, lambda / n_batch);
                let (ce_text, _) = domain_ce(&mut branch.head, &text, 1, lambda / n_batch);
                terms.domain += lambda * 0.5 * (ce_eeg + ce_text) / n_batch;
                // d_eeg already carries the 0.5·λ/n_batch scale; reversal
                // flips its sign on the encoder path only
                pooled_grad = Some(d_eeg.iter().map(|d| -d).collect());
            }
        }

        feature_pool.reserve(n * live.len() * code_dim);
        for g in 0..n {
            for &ti in &live {
                for ci in 0..code_dim {
                    feature_pool.push(f.at3(g, ti, ci));
                }
            }
        }

        states.push(WindowState {
            n,
            t,
            live,
            d_time_out,
            d_freq_out,
            commit_grads,
            pooled_grad,
        });
    }

    terms.total = terms.time + terms.freq + terms.commit + terms.domain;

    // reverse pass, windows in reverse order so layer caches pop in step
    for state in states.iter().rev() {
        let (n, t) = (state.n, state.t);
        let flen = dft_magnitude_len(model.patch_len);
        let mut d_fhat = Tensor::zeros(&[n, t, code_dim]);
        for g in (0..n).rev() {
            let dt = &state.d_time_out[g * t * model.patch_len..(g + 1) * t * model.patch_len];
            let df = &state.d_freq_out[g * t * flen..(g + 1) * t * flen];
            let d_row_f = model.freq_dec.backward(df);
            let d_row_t = model.time_dec.backward(dt);
            for ti in 0..t {
                for ci in 0..code_dim {
                    let v = d_row_t[ti * code_dim + ci] + d_row_f[ti * code_dim + ci];
                    d_fhat.set3(g, ti, ci, d_fhat.at3(g, ti, ci) + v);
                }
            }
        }

        // residual-chain backward: fine to coarse.
        // f_hat = sum_s phi_s(u_s); resid_{i+1} = resid_i - phi_i(u_i)
        // d phi_i-output = d f_hat - d resid_{i+1}
        let scales = model.subset.scales().to_vec();
        let mut d_resid = Tensor::zeros(&[n, t, code_dim]);
        for (i, &s) in scales.iter().enumerate().rev() {
            let dz = &state.commit_grads[i];
            // z_i = downscale(resid_i): adjoint spreads dz over members
            let adj = downscale_adjoint(dz, &model.hierarchy, s, model.subset.target_scale())?;
            let mut d_p = Tensor::zeros(&[n, t, code_dim]);
            for (dp, (dfh, dr)) in d_p
                .data_mut()
                .iter_mut()
                .zip(d_fhat.data().iter().zip(d_resid.data()))
            {
                *dp = dfh - dr;
            }
            let _du = model.phi.backward(s, &d_p)?;
            for (dr, a) in d_resid.data_mut().iter_mut().zip(adj.data()) {
                *dr += a;
            }
        }

        // encoder gradient: straight-through copy of d f_hat plus the
        // residual-chain term, plus the reversed domain gradient
        let mut d_f = d_fhat;
        for (df, dr) in d_f.data_mut().iter_mut().zip(d_resid.data()) {
            *df += dr;
        }
        if let Some(dp) = &state.pooled_grad {
            let cells = (n * state.live.len()) as f64;
            for g in 0..n {
                for &ti in &state.live {
                    for ci in 0..code_dim {
                        let v = d_f.at3(g, ti, ci) + dp[ci] / cells;
                        d_f.set3(g, ti, ci, v);
                    }
                }
            }
        }
        for g in (0..n).rev() {
            for ti in (0..t).rev() {
                let row: Vec<f64> = (0..code_dim).map(|ci| d_f.at3(g, ti, ci)).collect();
                model.encoder.backward(&row);
            }
        }
    }

    Ok(StepTrace {
        terms,
        ema_pairs,
        feature_pool,
    })
}

/// Cross-entropy of a 2-class linear head on one feature vector; returns the
/// loss and d loss / d feature, with head gradients scaled by `weight`.
fn domain_ce(head: &mut Linear, feat: &[f64], label: usize, weight: f64) -> (f64, Vec<f64>) {
    let logits = head.forward(feat);
    let m = logits[0].max(logits[1]);
    let z = (logits[0] - m).exp() + (logits[1] - m).exp();
    let log_probs = [logits[0] - m - z.ln(), logits[1] - m - z.ln()];
    let loss = -log_probs[label];
    let p0 = log_probs[0].exp();
    let p1 = log_probs[1].exp();
    let mut dlogits = [p0, p1];
    dlogits[label] -= 1.0;
    // halve: each of the two domain samples carries half the batch term
    let dl: Vec<f64> = dlogits.iter().map(|d| d * 0.5 * weight).collect();
    let dfeat = head.backward(&dl);
    (loss, dfeat)
}

/// Keep only the listed patch columns of a `[G, T, C]` map.
fn slice_patches(map: &Tensor, keep: &[usize]) -> Tensor {
    let (g_n, _, c_n) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    Tensor::from_fn(&[g_n, keep.len(), c_n], |i| {
        let c = i % c_n;
        let k = (i / c_n) % keep.len();
        let g = i / (c_n * keep.len());
        map.at3(g, keep[k], c)
    })
}

fn slice_tokens(tok: &TokenMap, keep: &[usize]) -> TokenMap {
    TokenMap {
        scale: tok.scale,
        groups: tok.groups,
        t_len: keep.len(),
        ids: (0..tok.groups)
            .flat_map(|g| keep.iter().map(move |&t| tok.id(g, t)))
            .collect(),
    }
}

/// Scatter a sliced gradient back to full patch columns, scaled.
fn unslice_patches(grad: &Tensor, keep: &[usize], t_full: usize, scale: f64) -> Tensor {
    let (g_n, _, c_n) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let mut out = Tensor::zeros(&[g_n, t_full, c_n]);
    for g in 0..g_n {
        for (k, &t) in keep.iter().enumerate() {
            for c in 0..c_n {
                out.set3(g, t, c, grad.at3(g, k, c) * scale);
            }
        }
    }
    out
}

/// Adjoint of mean pooling: each fine group receives its coarse group's
/// gradient divided by the member count.
fn downscale_adjoint(
    dz: &Tensor,
    h: &Hierarchy,
    scale: usize,
    target: usize,
) -> Result<Tensor, BthError> {
    let mut counts = vec![0usize; h.n_groups(scale)];
    for g in 0..h.n_groups(target) {
        counts[h.ancestor(target, g, scale)] += 1;
    }
    let (t_n, c_n) = (dz.shape()[1], dz.shape()[2]);
    let scaled = Tensor::from_fn(&[h.n_groups(scale), t_n, c_n], |i| {
        let g = i / (t_n * c_n);
        dz.data()[i] / counts[g] as f64
    });
    upscale(&scaled, h, scale, target)
}

/// Compound loss on explicit predictions; the training loop computes the
/// same thing fused with backward.
#[allow(clippy::too_many_arguments)]
pub fn compound_loss(
    eeg: &Tensor,
    eeg_hat: &Tensor,
    fre: &Tensor,
    fre_hat: &Tensor,
    commit: f64,
    domain_ce_value: f64,
    lambda: f64,
    live: &[usize],
) -> Result<LossTerms, TokenizerError> {
    if eeg.shape() != eeg_hat.shape() || fre.shape() != fre_hat.shape() {
        return Err(TokenizerError::Shape(format!(
            "{:?} vs {:?}, {:?} vs {:?}",
            eeg.shape(),
            eeg_hat.shape(),
            fre.shape(),
            fre_hat.shape()
        )));
    }
    let mut terms = LossTerms {
        commit,
        domain: lambda * domain_ce_value,
        ..Default::default()
    };
    let n = eeg.shape()[0];
    let p = eeg.shape()[2];
    let fl = fre.shape()[2];
    for g in 0..n {
        for &ti in live {
            for k in 0..p {
                let d = eeg_hat.at3(g, ti, k) - eeg.at3(g, ti, k);
                terms.time += d * d;
            }
            for k in 0..fl {
                let d = fre_hat.at3(g, ti, k) - fre.at3(g, ti, k);
                terms.freq += d * d;
            }
        }
    }
    terms.total = terms.time + terms.freq + terms.commit + terms.domain;
    Ok(terms)
}

/// One report row per optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub terms: LossTerms,
    pub lambda: f64,
    pub pcc_val: f64,
}

pub struct TrainOutcome {
    pub model: TokenizerModel,
    pub records: Vec<StepRecord>,
    pub final_pcc: f64,
}

/// Loads every window of a split.
pub fn load_windows(
    manifest: &DatasetManifest,
    split: Split,
    window: usize,
    patch: usize,
) -> Result<Vec<WindowItem>, TokenizerError> {
    let mut items = Vec::new();
    for entry in manifest.split(split) {
        let seg = crate::signalio::read_segment(&entry.path)?;
        let set = patchify(&seg, window, patch)?;
        for (w, g) in set.windows.into_iter().zip(set.grids) {
            items.push(WindowItem {
                patches: w,
                grid: g,
            });
        }
    }
    Ok(items)
}

/// Mean validation PCC: reconstructions pooled over all unpadded samples.
pub fn validation_pcc(model: &mut TokenizerModel, items: &[WindowItem]) -> Result<f64, TokenizerError> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for item in items {
        let (n, t) = (item.patches.shape()[0], item.patches.shape()[1]);
        let live = unpadded_patches(&item.grid);
        let f = model.encode_window(&item.patches);
        let enc = crate::vq::encode_multiscale(
            &f,
            &model.hierarchy,
            &model.subset,
            &model.codebook,
            &mut model.phi,
        )?;
        let mut f_hat = f.clone();
        for (fh, r) in f_hat.data_mut().iter_mut().zip(enc.residual.data()) {
            *fh -= r;
        }
        let code_dim = model.codebook.dim();
        for g in 0..n {
            let fh = &f_hat;
            let row: Vec<f64> = (0..t)
                .flat_map(|ti| (0..code_dim).map(move |c| fh.at3(g, ti, c)))
                .collect();
            let out = model.time_dec.forward(&row);
            for &ti in &live {
                let ps = (g * t + ti) * model.patch_len;
                truth.extend_from_slice(&item.patches.data()[ps..ps + model.patch_len]);
                pred.extend_from_slice(&out[ti * model.patch_len..(ti + 1) * model.patch_len]);
            }
        }
        model.clear_caches();
    }
    Ok(pcc(&truth, &pred))
}

pub fn train_tokenizer(
    manifest: &DatasetManifest,
    params: &TrainParams,
) -> Result<TrainOutcome, TokenizerError> {
    let model = TokenizerModel::new(params)?;
    train_tokenizer_with(model, manifest, params)
}

/// Training loop over an existing model (custom hierarchies).
pub fn train_tokenizer_with(
    mut model: TokenizerModel,
    manifest: &DatasetManifest,
    params: &TrainParams,
) -> Result<TrainOutcome, TokenizerError> {
    let train: Vec<WindowItem> = load_windows(manifest, Split::Train, params.window, params.patch)?;
    let val: Vec<WindowItem> = load_windows(manifest, Split::Val, params.window, params.patch)?;
    if train.is_empty() {
        return Err(TokenizerError::EmptySplit("train"));
    }
    let steps_per_epoch = train.len().div_ceil(params.batch);
    let total_steps = steps_per_epoch * params.epochs;
    let schedule = LrSchedule {
        peak: params.peak_lr,
        min: params.min_lr,
        warmup: (params.warmup_epochs * steps_per_epoch) as u64,
        total: total_steps as u64,
    };
    let mut opt = AdamW::new(AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: params.weight_decay,
    });
    let lambda_schedule = LambdaSchedule::new(total_steps.max(1))?;
    let mut shuffle_rng = StreamRng::new(params.seed, "tokenizer/shuffle");
    let mut domain_rng = StreamRng::new(params.seed, "tokenizer/domain-data");
    let mut reseed_rng = StreamRng::new(params.seed, "tokenizer/reseed");
    let mut records = Vec::with_capacity(total_steps);
    let mut last_pcc = 0.0;
    let mut step = 0usize;
    for _epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_pool: Vec<f64> = Vec::new();
        for chunk in order.chunks(params.batch) {
            let lambda = if model.domain.is_some() {
                lambda_schedule.at(step)?
            } else {
                0.0
            };
            let batch: Vec<&WindowItem> = chunk.iter().map(|&i| &train[i]).collect();
            model.zero_grads();
            let trace = batch_step(&mut model, &batch, lambda, &mut domain_rng)?;
            if !trace.terms.total.is_finite() {
                return Err(TokenizerError::Diverged {
                    step,
                    loss: trace.terms.total,
                });
            }
            opt.step(&mut model, schedule.at(step as u64));
            for pairs in &trace.ema_pairs {
                for (z, tok) in pairs {
                    if tok.t_len > 0 {
                        model.codebook.ema_update(z, tok)?;
                    }
                }
            }
            epoch_pool.extend_from_slice(&trace.feature_pool);
            records.push(StepRecord {
                step,
                terms: trace.terms,
                lambda,
                pcc_val: last_pcc,
            });
            step += 1;
        }
        if !epoch_pool.is_empty() {
            model.codebook.end_epoch(&epoch_pool, &mut reseed_rng)?;
        }
        if !val.is_empty() {
            last_pcc = validation_pcc(&mut model, &val)?;
            if let Some(rec) = records.last_mut() {
                rec.pcc_val = last_pcc;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        final_pcc: last_pcc,
    })
}
