//! Preprocessing: notch, band-pass, resample to 200 Hz, robust scaling, and
//! patch/window segmentation.
//!
//! Filters are designed as cascaded biquads and applied forward-backward for
//! zero phase. All stages run in f64 regardless of the storage format.

use num_complex::Complex64;

use crate::nn::Tensor;
use crate::signalio::EegSegment;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("filter edge {edge} Hz at or above Nyquist ({nyquist} Hz)")]
    EdgeAboveNyquist { edge: f64, nyquist: f64 },
    #[error("invalid filter edges {0:?}")]
    BadEdges(Vec<f64>),
    #[error("filter order {0} not supported for this kind")]
    BadOrder(usize),
    #[error("designed filter is unstable (pole magnitude {0} >= 1)")]
    Unstable(f64),
    #[error("segment of {len} samples shorter than the filter warm-up length {padlen}")]
    SegmentTooShort { len: usize, padlen: usize },
    #[error("cannot resample {from} Hz to {to} Hz with a small rational ratio")]
    UnsupportedRate { from: f64, to: f64 },
    #[error("patch length must be positive and at most the window length")]
    BadPatchParams,
    #[error("window length {w} is not a whole number of patches (needed for exact inversion)")]
    NonInvertiblePatching { w: usize },
    #[error(transparent)]
    Signal(#[from] crate::signalio::SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Bandpass,
    Notch,
}

/// One second-order section, normalized so a0 == 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Gain of this section at normalized angular frequency `w` (rad/sample).
    fn gain_at(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = Complex64::from_polar(1.0, -2.0 * w);
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        // Roots of z^2 + a1 z + a2.
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (Complex64::new(-self.a1, 0.0) + disc) / 2.0;
        let r2 = (Complex64::new(-self.a1, 0.0) - disc) / 2.0;
        r1.norm().max(r2.norm())
    }
}

/// A designed filter: cascaded sections plus its design parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub edges: Vec<f64>,
    pub order: usize,
    pub rate: f64,
    pub sos: Vec<Biquad>,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<(), DspError> {
        let nyquist = self.rate / 2.0;
        for &e in &self.edges {
            if e >= nyquist {
                return Err(DspError::EdgeAboveNyquist { edge: e, nyquist });
            }
        }
        for s in &self.sos {
            let r = s.pole_radius();
            if r >= 1.0 {
                return Err(DspError::Unstable(r));
            }
        }
        Ok(())
    }

    /// Single-pass magnitude response at `f_hz`.
    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        let w = std::f64::consts::TAU * f_hz / self.rate;
        self.sos
            .iter()
            .map(|s| s.gain_at(w).norm())
            .product()
    }

    pub fn n_sections(&self) -> usize {
        self.sos.len()
    }
}

/// Butterworth band-pass (analog prototype of the given order, band
/// transform, bilinear with prewarping) or a single-section notch with
/// quality factor 30.
pub fn design_filter(
    kind: FilterKind,
    edges: &[f64],
    rate: f64,
    order: usize,
) -> Result<FilterSpec, DspError> {
    let nyquist = rate / 2.0;
    for &e in edges {
        if !(e > 0.0) {
            return Err(DspError::BadEdges(edges.to_vec()));
        }
        if e >= nyquist {
            return Err(DspError::EdgeAboveNyquist { edge: e, nyquist });
        }
    }
    let sos = match kind {
        FilterKind::Bandpass => {
            if edges.len() != 2 || edges[0] >= edges[1] {
                return Err(DspError::BadEdges(edges.to_vec()));
            }
            if order == 0 || order > 12 {
                return Err(DspError::BadOrder(order));
            }
            butterworth_bandpass_sos(edges[0], edges[1], rate, order)
        }
        FilterKind::Notch => {
            if edges.len() != 1 {
                return Err(DspError::BadEdges(edges.to_vec()));
            }
            if order != 2 {
                return Err(DspError::BadOrder(order));
            }
            vec![notch_biquad(edges[0], rate, 30.0)]
        }
    };
    let spec = FilterSpec {
        kind,
        edges: edges.to_vec(),
        order,
        rate,
        sos,
    };
    spec.validate()?;
    Ok(spec)
}

/// RBJ cookbook notch at `f0` with quality factor `q`.
fn notch_biquad(f0: f64, rate: f64, q: f64) -> Biquad {
    let w0 = std::f64::consts::TAU * f0 / rate;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    Biquad {
        b0: 1.0 / a0,
        b1: -2.0 * w0.cos() / a0,
        b2: 1.0 / a0,
        a1: -2.0 * w0.cos() / a0,
        a2: (1.0 - alpha) / a0,
    }
}

/// Analog Butterworth prototype -> band transform -> bilinear, returned as
/// one biquad per digital pole pair with the gain spread evenly.
fn butterworth_bandpass_sos(f_lo: f64, f_hi: f64, rate: f64, order: usize) -> Vec<Biquad> {
    let fs2 = 2.0 * rate;
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / rate).tan();
    let (w1, w2) = (warp(f_lo), warp(f_hi));
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // Prototype poles on the unit circle, left half-plane.
    let n = order;
    let proto: Vec<Complex64> = (1..=n)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Band transform: each prototype pole p yields the two roots of
    // s^2 - (bw p) s + w0^2.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for p in proto {
        let bp = p * bw;
        let disc = (bp * bp / 4.0 - w0sq).sqrt();
        analog_poles.push(bp / 2.0 + disc);
        analog_poles.push(bp / 2.0 - disc);
    }

    // Bilinear map; gain follows the pole/zero factor transformation with n
    // analog zeros at s = 0 and gain bw^n.
    let mut k = Complex64::new(bw.powi(n as i32), 0.0) * Complex64::new(fs2, 0.0).powi(n as i32);
    let mut digital_poles = Vec::with_capacity(2 * n);
    for &p in &analog_poles {
        digital_poles.push((Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p));
        k /= Complex64::new(fs2, 0.0) - p;
    }
    let gain = k.re; // imaginary part cancels over conjugate pairs

    // Pair conjugate poles: sort by imaginary part magnitude then real part
    // so that p and its conjugate are adjacent.
    let mut upper: Vec<Complex64> = digital_poles.iter().cloned().filter(|p| p.im >= 0.0).collect();
    upper.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    let section_gain = gain.abs().powf(1.0 / n as f64);
    let sign = if gain < 0.0 { -1.0 } else { 1.0 };
    let mut sos = Vec::with_capacity(n);
    for (i, p) in upper.iter().enumerate() {
        // Zeros at z = 1 and z = -1: numerator z^2 - 1.
        let g = if i == 0 { sign * section_gain } else { section_gain };
        sos.push(Biquad {
            b0: g,
            b1: 0.0,
            b2: -g,
            a1: -2.0 * p.re,
            a2: p.norm_sqr(),
        });
    }
    sos
}

/// Single forward pass of the cascade, zero initial state.
pub fn sosfilt(spec: &FilterSpec, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &spec.sos {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let xn = *v;
            let yn = s.b0 * xn + s1;
            s1 = s.b1 * xn - s.a1 * yn + s2;
            s2 = s.b2 * xn - s.a2 * yn;
            *v = yn;
        }
    }
    y
}

/// Unit-step steady-state internal state for one section, for input level 1.
fn step_state(s: &Biquad) -> (f64, f64) {
    let g = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    let s2 = s.b2 - s.a2 * g;
    let s1 = s.b1 - s.a1 * g + s2;
    (s1, s2)
}

fn sosfilt_zi(spec: &FilterSpec, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &spec.sos {
        let (zi1, zi2) = step_state(s);
        let x0 = y.first().copied().unwrap_or(0.0);
        let (mut s1, mut s2) = (zi1 * x0, zi2 * x0);
        for v in y.iter_mut() {
            let xn = *v;
            let yn = s.b0 * xn + s1;
            s1 = s.b1 * xn - s.a1 * yn + s2;
            s2 = s.b2 * xn - s.a2 * yn;
            *v = yn;
        }
    }
    y
}

/// Forward-backward filtering with odd-reflection padding and step-matched
/// initial conditions: zero net phase, squared magnitude response.
///
/// The padding must outlast the slowest pole or its ring-in leaks into the
/// output, so it extends to roughly seven decay constants (capped at the
/// signal length). Inputs shorter than the minimum warm-up are rejected.
pub fn filtfilt(spec: &FilterSpec, x: &[f64]) -> Result<Vec<f64>, DspError> {
    let min_padlen = 3 * (2 * spec.sos.len() + 1);
    if x.len() <= min_padlen {
        return Err(DspError::SegmentTooShort {
            len: x.len(),
            padlen: min_padlen,
        });
    }
    let r_max = spec
        .sos
        .iter()
        .map(|s| s.pole_radius())
        .fold(0.0, f64::max)
        .min(1.0 - 1e-12);
    let decay_len = (-7.0 / r_max.ln()).ceil() as usize;
    let padlen = min_padlen.max(decay_len).min(x.len() - 1);
    let n = x.len();
    // Odd reflection, cosine-tapered toward the edge value so the padding
    // settles instead of mirroring ring-in back into the signal. The taper
    // keeps the padding a fixed linear function of the input.
    let taper = |i: usize| 0.5 * (1.0 + (std::f64::consts::PI * i as f64 / padlen as f64).cos());
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(x[0] + (x[0] - x[i]) * taper(i));
    }
    ext.extend_from_slice(x);
    for i in 1..=padlen {
        ext.push(x[n - 1] + (x[n - 1] - x[n - 1 - i]) * taper(i));
    }
    let mut fwd = sosfilt_zi(spec, &ext);
    fwd.reverse();
    let mut bwd = sosfilt_zi(spec, &fwd);
    bwd.reverse();
    Ok(bwd[padlen..padlen + n].to_vec())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Rational ratio `to/from` as (up, down), if small enough.
fn rate_ratio(from: f64, to: f64) -> Option<(usize, usize)> {
    let scale = 1000.0;
    let a = (from * scale).round() as u64;
    let b = (to * scale).round() as u64;
    if a == 0 || b == 0 {
        return None;
    }
    if ((a as f64) - from * scale).abs() > 1e-6 || ((b as f64) - to * scale).abs() > 1e-6 {
        return None;
    }
    let g = gcd(a, b);
    let (down, up) = ((a / g) as usize, (b / g) as usize);
    if up > 500 || down > 500 {
        return None;
    }
    Some((up, down))
}

fn kaiser_i0(x: f64) -> f64 {
    // Series expansion; converges quickly for the beta range used here.
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = (x / 2.0) * (x / 2.0);
    for k in 1..=40 {
        term *= half_sq / (k as f64 * k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase rational resampler with a Kaiser-windowed low-pass
/// (beta 7.857, about 80 dB of alias suppression). Output length is
/// `ceil(n * up / down)`; output sample `j` sits at input time `j*down/up`.
pub fn resample(x: &[f64], rate_from: f64, rate_to: f64) -> Result<Vec<f64>, DspError> {
    if (rate_from - rate_to).abs() < 1e-9 {
        return Ok(x.to_vec());
    }
    let (up, down) = rate_ratio(rate_from, rate_to).ok_or(DspError::UnsupportedRate {
        from: rate_from,
        to: rate_to,
    })?;
    let max_ud = up.max(down);
    let beta = 7.857;
    let half_len = 40 * max_ud; // transition band ~0.057*pi/max_ud keeps 0.8*Nyquist tones clean
    let taps = 2 * half_len + 1;
    let fc = 0.5 / max_ud as f64; // cycles/sample at the upsampled rate
    let denom = kaiser_i0(beta);
    let h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - half_len as f64;
            let w = {
                let r = t / half_len as f64;
                kaiser_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
            };
            up as f64 * 2.0 * fc * sinc(2.0 * fc * t) * w
        })
        .collect();

    let n_in = x.len();
    let n_out = (n_in * up).div_ceil(down);
    let mut y = vec![0.0; n_out];
    for (j, yj) in y.iter_mut().enumerate() {
        // Center of the filter at upsampled index j*down.
        let u = j * down;
        // h index = u + half_len - k*up must lie in [0, taps).
        let k_min = (u + half_len + 1).saturating_sub(taps).div_ceil(up);
        let k_max = ((u + half_len) / up).min(n_in - 1);
        let mut acc = 0.0;
        for k in k_min..=k_max {
            acc += h[u + half_len - k * up] * x[k];
        }
        *yj = acc;
    }
    Ok(y)
}

/// Type-7 (linear interpolation) quantile of already-sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Median and interquartile range.
pub fn median_iqr(x: &[f64]) -> (f64, f64) {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    (median, iqr)
}

/// `(x - median) / IQR` in place. When the IQR is zero, or has collapsed
/// below `degenerate_ratio` of `reference_iqr` (a filter annihilated the
/// channel), only the median is subtracted.
pub fn robust_scale(x: &mut [f64], reference_iqr: f64, degenerate_ratio: f64) {
    let (median, iqr) = median_iqr(x);
    let degenerate = iqr == 0.0 || iqr < degenerate_ratio * reference_iqr;
    for v in x.iter_mut() {
        *v -= median;
        if !degenerate {
            *v /= iqr;
        }
    }
}

pub const TARGET_RATE: f64 = 200.0;

/// Full §-style chain: notch at `line_hz`, 0.1-75 Hz band-pass, resample to
/// 200 Hz, per-channel robust scaling.
pub fn preprocess(seg: &EegSegment, line_hz: f64) -> Result<EegSegment, DspError> {
    seg.validate()?;
    assert!(
        line_hz == 50.0 || line_hz == 60.0,
        "line frequency must be 50 or 60 Hz"
    );
    let notch = design_filter(FilterKind::Notch, &[line_hz], seg.rate, 2)?;
    let band = design_filter(FilterKind::Bandpass, &[0.1, 75.0], seg.rate, 4)?;
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(seg.n_channels);
    for c in 0..seg.n_channels {
        let raw = seg.channel(c);
        let (_, ref_iqr) = median_iqr(raw);
        let filtered = filtfilt(&band, &filtfilt(&notch, raw)?)?;
        let mut out = resample(&filtered, seg.rate, TARGET_RATE)?;
        robust_scale(&mut out, ref_iqr, 1e-2);
        channels.push(out);
    }
    let n_samples = channels[0].len();
    let mut data = Vec::with_capacity(seg.n_channels * n_samples);
    for ch in &channels {
        data.extend_from_slice(ch);
    }
    let mut out = EegSegment::new(&seg.montage_id, TARGET_RATE, seg.n_channels, n_samples, data)?;
    out.label = seg.label;
    Ok(out)
}

/// Padding layout of one window: which (channel, patch) cells contain at
/// least one zero-padded sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub n_channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub window_len: usize,
    /// `[n_channels * n_patches]`, row-major.
    pub pad_mask: Vec<bool>,
}

impl PatchGrid {
    pub fn padded(&self, channel: usize, patch: usize) -> bool {
        self.pad_mask[channel * self.n_patches + patch]
    }

    pub fn any_padding(&self) -> bool {
        self.pad_mask.iter().any(|&b| b)
    }
}

/// A segment cut into fixed windows of `w` samples, each patched into
/// `[N, T, P]` tensors.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub windows: Vec<Tensor>,
    pub grids: Vec<PatchGrid>,
    pub n_channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub window_len: usize,
    pub n_samples: usize,
}

/// Cuts non-overlapping windows of length `w` (last window zero-padded),
/// then splits each window into `T = floor(w/p)` patches of length `p`.
/// A patch is flagged in the grid when any of its samples is padding.
pub fn patchify(seg: &EegSegment, w: usize, p: usize) -> Result<PatchSet, DspError> {
    if p == 0 || p > w {
        return Err(DspError::BadPatchParams);
    }
    let t = w / p;
    let n_windows = seg.n_samples.div_ceil(w).max(1);
    let mut windows = Vec::with_capacity(n_windows);
    let mut grids = Vec::with_capacity(n_windows);
    for wi in 0..n_windows {
        let start = wi * w;
        let mut tensor = Tensor::zeros(&[seg.n_channels, t, p]);
        let mut mask = vec![false; seg.n_channels * t];
        for c in 0..seg.n_channels {
            let ch = seg.channel(c);
            for ti in 0..t {
                let mut any_pad = false;
                for pi in 0..p {
                    let src = start + ti * p + pi;
                    if src < seg.n_samples {
                        tensor.set3(c, ti, pi, ch[src]);
                    } else {
                        any_pad = true;
                    }
                }
                mask[c * t + ti] = any_pad;
            }
        }
        windows.push(tensor);
        grids.push(PatchGrid {
            n_channels: seg.n_channels,
            n_patches: t,
            patch_len: p,
            window_len: w,
            pad_mask: mask,
        });
    }
    Ok(PatchSet {
        windows,
        grids,
        n_channels: seg.n_channels,
        n_patches: t,
        patch_len: p,
        window_len: w,
        n_samples: seg.n_samples,
    })
}

/// Inverse of `patchify` for window lengths that are a whole number of
/// patches; returns channel-major samples of the original length.
pub fn unpatchify(set: &PatchSet) -> Result<Vec<f64>, DspError> {
    if set.patch_len * set.n_patches != set.window_len {
        return Err(DspError::NonInvertiblePatching { w: set.window_len });
    }
    let mut data = vec![0.0; set.n_channels * set.n_samples];
    for (wi, win) in set.windows.iter().enumerate() {
        let start = wi * set.window_len;
        for c in 0..set.n_channels {
            for ti in 0..set.n_patches {
                for pi in 0..set.patch_len {
                    let dst = start + ti * set.patch_len + pi;
                    if dst < set.n_samples {
                        data[c * set.n_samples + dst] = win.at3(c, ti, pi);
                    }
                }
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (std::f64::consts::TAU * f * i as f64 / rate).sin())
            .collect()
    }

    #[test]
    fn bandpass_attenuates_ninety_hz_by_twenty_db() {
        let spec = design_filter(FilterKind::Bandpass, &[0.1, 75.0], 200.0, 4).unwrap();
        assert_eq!(spec.n_sections(), 4);
        let db = 20.0 * spec.magnitude_at(90.0).log10();
        assert!(db <= -20.0, "response at 90 Hz: {db} dB");
        // Mid-band is essentially flat.
        let mid = 20.0 * spec.magnitude_at(20.0).log10();
        assert!(mid.abs() < 0.5, "mid-band {mid} dB");
    }

    #[test]
    fn bandpass_response_measured_from_filtered_impulse() {
        // Independent route: DFT of the impulse response instead of the
        // analytic transfer function.
        use crate::nn::dft_magnitude;
        let spec = design_filter(FilterKind::Bandpass, &[0.1, 75.0], 200.0, 4).unwrap();
        let mut impulse = vec![0.0; 4000];
        impulse[0] = 1.0;
        let h = sosfilt(&spec, &impulse);
        let mag = dft_magnitude(&h);
        // dft_magnitude scales by 1/n; the transfer function is the raw DFT.
        let at = |f_hz: f64| mag[(f_hz * 4000.0 / 200.0).round() as usize] * 4000.0;
        assert!(20.0 * at(90.0).log10() <= -20.0);
        assert!((at(20.0) - spec.magnitude_at(20.0)).abs() < 1e-3);
    }

    #[test]
    fn notch_kills_center_and_spares_forty_hz() {
        let spec = design_filter(FilterKind::Notch, &[50.0], 200.0, 2).unwrap();
        let at50 = 20.0 * spec.magnitude_at(50.0).log10();
        let at40 = 20.0 * spec.magnitude_at(40.0).log10();
        assert!(at50 <= -20.0, "50 Hz: {at50} dB");
        assert!(at40 >= -1.0, "40 Hz: {at40} dB");
    }

    #[test]
    fn notch_at_or_above_nyquist_is_rejected() {
        let err = design_filter(FilterKind::Notch, &[120.0], 200.0, 2).unwrap_err();
        assert!(matches!(err, DspError::EdgeAboveNyquist { .. }));
        assert!(design_filter(FilterKind::Bandpass, &[0.1, 100.0], 200.0, 4).is_err());
    }

    #[test]
    fn designed_filters_are_stable() {
        for order in [1, 2, 4, 8] {
            let spec = design_filter(FilterKind::Bandpass, &[0.5, 70.0], 256.0, order).unwrap();
            spec.validate().unwrap();
        }
    }

    #[test]
    fn filtfilt_is_linear() {
        let spec = design_filter(FilterKind::Bandpass, &[0.1, 75.0], 200.0, 4).unwrap();
        let x = tone(10.0, 200.0, 600);
        let y = tone(33.0, 200.0, 600);
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(y.iter()).map(|(u, v)| a * u + b * v).collect();
        let lhs = filtfilt(&spec, &combo).unwrap();
        let fx = filtfilt(&spec, &x).unwrap();
        let fy = filtfilt(&spec, &y).unwrap();
        let scale = lhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..lhs.len() {
            let rhs = a * fx[i] + b * fy[i];
            assert!(
                (lhs[i] - rhs).abs() / scale < 1e-9,
                "sample {i}: {} vs {rhs}",
                lhs[i]
            );
        }
    }

    #[test]
    fn filtfilt_rejects_too_short_input() {
        let spec = design_filter(FilterKind::Bandpass, &[0.1, 75.0], 200.0, 4).unwrap();
        // padlen = 3*(2*4+1) = 27.
        assert!(matches!(
            filtfilt(&spec, &vec![0.0; 27]),
            Err(DspError::SegmentTooShort { .. })
        ));
        assert!(filtfilt(&spec, &vec![0.0; 28]).is_ok());
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        use crate::nn::dft_magnitude;
        // 10 Hz tone at 400 Hz, resampled to 200 Hz.
        let x = tone(10.0, 400.0, 1600);
        let y = resample(&x, 400.0, 200.0).unwrap();
        assert_eq!(y.len(), 800);
        let mag = dft_magnitude(&y);
        let peak = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let peak_hz = peak as f64 * 200.0 / y.len() as f64;
        assert!((peak_hz - 10.0).abs() / 10.0 < 0.01, "peak at {peak_hz} Hz");
        // Amplitude survives within a few percent mid-signal.
        let mid_rms: f64 =
            (y[200..600].iter().map(|v| v * v).sum::<f64>() / 400.0).sqrt();
        assert!((mid_rms - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.03);
    }

    #[test]
    fn resample_tone_near_cutoff_stays_put() {
        use crate::nn::dft_magnitude;
        // 0.8 * Nyquist of the lower rate: 0.8 * 100 = 80 Hz at 400 -> 200.
        let x = tone(79.0, 400.0, 1600);
        let y = resample(&x, 400.0, 200.0).unwrap();
        let mag = dft_magnitude(&y);
        let peak = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let peak_hz = peak as f64 * 200.0 / y.len() as f64;
        assert!((peak_hz - 79.0).abs() / 79.0 < 0.01, "peak at {peak_hz} Hz");
    }

    #[test]
    fn resample_identity_and_unsupported_ratio() {
        let x = tone(5.0, 200.0, 100);
        assert_eq!(resample(&x, 200.0, 200.0).unwrap(), x);
        assert!(matches!(
            resample(&x, 199.9173, 200.0),
            Err(DspError::UnsupportedRate { .. })
        ));
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&sorted, 0.5), 2.5);
        assert_eq!(quantile_sorted(&sorted, 0.25), 1.75);
        assert_eq!(quantile_sorted(&sorted, 0.75), 3.25);
        assert_eq!(quantile_sorted(&sorted, 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 4.0);
    }

    #[test]
    fn robust_scaling_is_idempotent() {
        let mut x: Vec<f64> = (0..500).map(|i| ((i * 7919 % 101) as f64) * 0.3 - 11.0).collect();
        robust_scale(&mut x, 1.0, 0.0);
        let (m1, i1) = median_iqr(&x);
        assert!(m1.abs() < 1e-12);
        assert!((i1 - 1.0).abs() < 1e-9);
        let before = x.clone();
        robust_scale(&mut x, i1, 0.0);
        let (m2, i2) = median_iqr(&x);
        assert!(m2.abs() < 1e-9);
        assert!((i2 / i1 - 1.0).abs() < 1e-6);
        for (a, b) in x.iter().zip(before.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_scales_to_zero() {
        let mut x = vec![42.0; 64];
        robust_scale(&mut x, 0.0, 1e-2);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    fn segment_from(data: Vec<f64>, n_channels: usize, rate: f64) -> EegSegment {
        let n_samples = data.len() / n_channels;
        EegSegment::new("test8", rate, n_channels, n_samples, data).unwrap()
    }

    #[test]
    fn preprocess_suppresses_line_noise() {
        // Zero-phase filtering leaves short transients at the segment
        // boundaries, so suppression is judged over a recording long enough
        // that this edge energy is negligible.  A cosine at the line
        // frequency starts and ends on extrema, the worst case for the
        // reflection padding.
        let n = 256_001;
        let cos_tone = |f: f64| -> Vec<f64> {
            (0..n)
                .map(|i| (std::f64::consts::TAU * f * i as f64 / 200.0).cos())
                .collect()
        };
        let line = segment_from(cos_tone(50.0), 1, 200.0);
        let pass = segment_from(cos_tone(10.0), 1, 200.0);
        let line_out = preprocess(&line, 50.0).unwrap();
        let pass_out = preprocess(&pass, 50.0).unwrap();
        let rms = |s: &EegSegment| {
            (s.data.iter().map(|v| v * v).sum::<f64>() / s.data.len() as f64).sqrt()
        };
        assert!(
            rms(&line_out) <= 0.1 * rms(&pass_out),
            "line {} vs pass {}",
            rms(&line_out),
            rms(&pass_out)
        );
    }

    #[test]
    fn preprocess_resamples_and_keeps_tone() {
        use crate::nn::dft_magnitude;
        let seg = segment_from(tone(10.0, 400.0, 2400), 1, 400.0);
        let out = preprocess(&seg, 50.0).unwrap();
        assert_eq!(out.rate, 200.0);
        assert_eq!(out.n_samples, 1200);
        let mag = dft_magnitude(out.channel(0));
        let peak = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let peak_hz = peak as f64 * 200.0 / out.n_samples as f64;
        assert!((peak_hz - 10.0).abs() / 10.0 < 0.01, "peak at {peak_hz} Hz");
    }

    #[test]
    fn preprocess_zeroes_constant_channels() {
        let seg = segment_from(vec![5.0; 800], 1, 200.0);
        let out = preprocess(&seg, 50.0).unwrap();
        assert!(
            out.data.iter().all(|&v| v.abs() < 1e-9),
            "max {}",
            out.data.iter().cloned().fold(0.0, f64::max)
        );
    }

    #[test]
    fn patchify_shapes_and_padding() {
        let seg = segment_from((0..2048).map(|i| i as f64).collect(), 2, 200.0);
        let set = patchify(&seg, 1024, 200).unwrap();
        assert_eq!(set.n_patches, 5);
        assert_eq!(set.windows.len(), 1);
        assert_eq!(set.windows[0].shape(), &[2, 5, 200]);
        assert!(!set.grids[0].any_padding());
    }

    #[test]
    fn one_extra_sample_forces_a_fully_padded_second_window() {
        let seg = segment_from((0..1025).map(|i| i as f64 * 0.5).collect(), 1, 200.0);
        let set = patchify(&seg, 1024, 200).unwrap();
        assert_eq!(set.windows.len(), 2);
        assert!(!set.grids[0].any_padding());
        // Window 2 holds one real sample and 1023 zeros; every patch of it
        // contains padding.
        for t in 0..5 {
            assert!(set.grids[1].padded(0, t), "patch {t} unmarked");
        }
        assert_eq!(set.windows[1].at3(0, 0, 0), 1024.0 * 0.5);
        assert_eq!(set.windows[1].at3(0, 0, 1), 0.0);
    }

    #[test]
    fn patchify_round_trips_when_patches_tile_the_window() {
        let data: Vec<f64> = (0..2000).map(|i| ((i * 37) % 251) as f64 * 0.25).collect();
        let seg = segment_from(data.clone(), 2, 200.0);
        let set = patchify(&seg, 500, 100).unwrap();
        assert_eq!(unpatchify(&set).unwrap(), data);
        // And a non-tiling window length refuses inversion.
        let lossy = patchify(&seg, 1024, 200).unwrap();
        assert!(matches!(
            unpatchify(&lossy),
            Err(DspError::NonInvertiblePatching { .. })
        ));
    }
}
