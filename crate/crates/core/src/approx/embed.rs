//! Fixed feature embeddings for quantile fractions, flow time, and values.

use std::f64::consts::PI;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    /// Size of the `cos(pi i tau)` basis.
    pub cosine_basis: usize,
    /// Width of the learned projection of the Fourier time features.
    pub fourier_dim: usize,
    /// Number of fixed frequencies; the raw feature vector has twice this length.
    pub fourier_freqs: usize,
    pub hlgauss_bins: usize,
    pub hlgauss_sigma: f64,
    pub hlgauss_range: (f64, f64),
    /// Width of the learned projection of the shortcut step-size features.
    pub step_embed_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            cosine_basis: 64,
            fourier_dim: 128,
            fourier_freqs: 64,
            hlgauss_bins: 51,
            hlgauss_sigma: 16.0,
            hlgauss_range: (-100.0, 100.0),
            step_embed_dim: 128,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("cosine_basis", self.cosine_basis),
            ("fourier_dim", self.fourier_dim),
            ("fourier_freqs", self.fourier_freqs),
            ("hlgauss_bins", self.hlgauss_bins),
            ("step_embed_dim", self.step_embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(config_err!("embedding {name} must be at least 1"));
        }
        let (lo, hi) = self.hlgauss_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(config_err!("HL-Gauss range [{lo}, {hi}] is empty"));
        }
        if !(self.hlgauss_sigma > 0.0) {
            return Err(config_err!("HL-Gauss sigma must be positive, got {}", self.hlgauss_sigma));
        }
        Ok(())
    }

    /// Length of [`fourier_features`] output.
    pub fn fourier_raw_dim(&self) -> usize {
        2 * self.fourier_freqs
    }
}

/// `cos(pi * i * tau)` for `i = 0..n`.
pub fn cosine_embed(tau: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    cosine_embed_into(tau, &mut out);
    out
}

pub fn cosine_embed_into(tau: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (PI * i as f64 * tau).cos();
    }
}

/// Geometric frequencies from 1 to 1000.
pub fn fourier_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 1000f64.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Interleaved `(sin(f t), cos(f t))` pairs over the fixed frequencies.
///
/// This is the fixed part of the time embedding; the learned projection to
/// `fourier_dim` lives in the network.
pub fn fourier_features(t: f64, cfg: &EmbeddingConfig) -> Vec<f64> {
    let freqs = fourier_frequencies(cfg.fourier_freqs);
    let mut out = vec![0.0; 2 * freqs.len()];
    fourier_features_into(t, &freqs, &mut out);
    out
}

pub fn fourier_features_into(t: f64, freqs: &[f64], out: &mut [f64]) {
    for (i, f) in freqs.iter().enumerate() {
        let (s, c) = (f * t).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

fn normal_cdf(x: f64) -> f64 {
    let u = x / std::f64::consts::SQRT_2;
    // erf is exactly +-1 in double precision beyond 5.93, so skipping the
    // call there changes nothing.
    if u >= 6.0 {
        1.0
    } else if u <= -6.0 {
        0.0
    } else {
        0.5 * (1.0 + libm::erf(u))
    }
}

/// Histogram-Gaussian embedding of a scalar value.
///
/// Bin `i` receives the mass a Gaussian of width `sigma` centred at `z`
/// places between its edges; the vector is renormalized to sum to one.
/// Values outside the range are clamped to it first.
pub fn hl_gauss_embed(z: f64, cfg: &EmbeddingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.hlgauss_bins];
    hl_gauss_embed_into(z, cfg, &mut out);
    out
}

pub fn hl_gauss_embed_into(z: f64, cfg: &EmbeddingConfig, out: &mut [f64]) {
    let (lo, hi) = cfg.hlgauss_range;
    let bins = out.len();
    let z = if z.is_nan() { lo } else { z.clamp(lo, hi) };
    let width = (hi - lo) / bins as f64;
    let inv = 1.0 / cfg.hlgauss_sigma;
    let mut prev = normal_cdf((lo - z) * inv);
    let mut total = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let edge = if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width };
        let cdf = normal_cdf((edge - z) * inv);
        *o = cdf - prev;
        total += *o;
        prev = cdf;
    }
    if total > 0.0 {
        out.iter_mut().for_each(|o| *o /= total);
    } else {
        // Sigma is so small that every edge rounds to the same side.
        out.iter_mut().for_each(|o| *o = 0.0);
        let idx = (((z - lo) / width) as usize).min(bins - 1);
        out[idx] = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basis_values() {
        assert_eq!(cosine_embed(0.0, 4), vec![1.0; 4]);
        let e = cosine_embed(1.0, 3);
        for (x, y) in e.iter().zip([1.0, -1.0, 1.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        for tau in [0.1, 0.5, 0.93] {
            assert_eq!(cosine_embed(tau, 5)[0], 1.0);
        }
    }

    #[test]
    fn fourier_at_zero() {
        let cfg = EmbeddingConfig::default();
        let f = fourier_features(0.0, &cfg);
        assert_eq!(f.len(), cfg.fourier_raw_dim());
        for pair in f.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(fourier_features(0.37, &cfg), fourier_features(0.37, &cfg));
        let freqs = fourier_frequencies(64);
        assert_eq!(freqs[0], 1.0);
        assert!((freqs[63] - 1000.0).abs() < 1e-9);
    }

    fn cfg(range: (f64, f64), bins: usize, sigma: f64) -> EmbeddingConfig {
        EmbeddingConfig {
            hlgauss_bins: bins,
            hlgauss_sigma: sigma,
            hlgauss_range: range,
            ..EmbeddingConfig::default()
        }
    }

    #[test]
    fn hl_gauss_is_probability_vector() {
        let c = cfg((-2.0, 3.0), 51, 0.2);
        for z in [-100.0, -2.0, 0.0, 0.77, 3.0, 1e9] {
            let e = hl_gauss_embed(z, &c);
            assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(e.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hl_gauss_degenerate_sigma_is_one_hot() {
        let c = cfg((0.0, 10.0), 10, 1e-9);
        let e = hl_gauss_embed(3.5, &c);
        for (i, p) in e.iter().enumerate() {
            let want = if i == 3 { 1.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-12, "bin {i}: {p}");
        }
    }

    #[test]
    fn hl_gauss_mirror_symmetry() {
        let c = cfg((-1.0, 1.0), 21, 0.15);
        let a = hl_gauss_embed(0.3, &c);
        let b = hl_gauss_embed(-0.3, &c);
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
