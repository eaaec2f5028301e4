//! One-sided discrete Fourier magnitude spectrum.

/// Number of one-sided bins for an input of length `p`: `p/2 + 1`.
pub fn dft_magnitude_len(p: usize) -> usize {
    p / 2 + 1
}

/// `|X_k| / P` for `k = 0..=P/2`.
///
/// A unit-amplitude sinusoid exactly on bin `k` yields 0.5 at that bin; a
/// constant signal `c` yields `|c|` at bin 0.
pub fn dft_magnitude(x: &[f64]) -> Vec<f64> {
    let p = x.len();
    assert!(p > 0, "empty input");
    let k_max = p / 2;
    // Twiddle lookup over m = (k*n) mod p keeps this O(p^2) with no trig in
    // the inner loop.
    let mut cos_t = vec![0.0; p];
    let mut sin_t = vec![0.0; p];
    for (m, (c, s)) in cos_t.iter_mut().zip(sin_t.iter_mut()).enumerate() {
        let ang = -2.0 * std::f64::consts::PI * m as f64 / p as f64;
        *c = ang.cos();
        *s = ang.sin();
    }
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut re = 0.0;
        let mut im = 0.0;
        let mut m = 0usize;
        for &v in x {
            re += v * cos_t[m];
            im += v * sin_t[m];
            m += k;
            if m >= p {
                m -= p;
            }
        }
        out.push((re * re + im * im).sqrt() / p as f64);
    }
    out
}
