//! Mel filterbank and DCT-II basis used by the MFCC pipeline.

use std::f64::consts::PI;

/// Triangular mel filterbank projecting one-sided power spectra onto mel bands.
///
/// Filters use the HTK mel scale `m = 2595 * log10(1 + f/700)` and are
/// area-normalized: each triangle is scaled by `2 / (f_hi - f_lo)`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Per filter: (first nonzero bin, weights over the nonzero span).
    rows: Vec<(usize, Vec<f64>)>,
    center_freqs_hz: Vec<f64>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: f64, f_min: f64, f_max: f64) -> Self {
        assert!(n_mels >= 1 && n_fft >= 2 && f_max > f_min);
        let n_bins = 1 + n_fft / 2;

        // n_mels + 2 corner frequencies, equally spaced on the mel scale.
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let corners: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();

        let bin_hz = sample_rate_hz / n_fft as f64;
        let mut rows = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (corners[m], corners[m + 1], corners[m + 2]);
            let scale = 2.0 / (hi - lo);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                let w = rising.min(falling).max(0.0) * scale;
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            rows.push((start.unwrap_or(0), weights));
        }

        Self { n_mels, n_bins, rows, center_freqs_hz: corners[1..=n_mels].to_vec() }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center_freqs_hz(&self) -> &[f64] {
        &self.center_freqs_hz
    }

    /// Project a one-sided power spectrum (`n_bins` values) onto mel bands.
    pub fn project(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        debug_assert_eq!(out.len(), self.n_mels);
        for (slot, (start, weights)) in out.iter_mut().zip(&self.rows) {
            let mut acc = 0.0;
            for (w, p) in weights.iter().zip(&power[*start..]) {
                acc += w * p;
            }
            *slot = acc;
        }
    }

    /// Dense weight matrix row for one filter (test/inspection helper).
    pub fn dense_row(&self, m: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_bins];
        let (start, weights) = &self.rows[m];
        row[*start..*start + weights.len()].copy_from_slice(weights);
        row
    }
}

/// Orthonormal DCT-II basis of shape `n_out x n_in`.
///
/// Rows k >= 1 see the input with its mean removed. The rows sum to zero, so
/// this changes nothing mathematically, but it keeps a constant input exactly
/// in the null space of the higher-order coefficients.
#[derive(Debug, Clone)]
pub struct DctBasis {
    n_in: usize,
    n_out: usize,
    rows: Vec<f64>,
}

impl DctBasis {
    pub fn new(n_out: usize, n_in: usize) -> Self {
        assert!(n_out >= 1 && n_out <= n_in);
        let mut rows = vec![0.0; n_out * n_in];
        for k in 0..n_out {
            let scale = if k == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
            let row = &mut rows[k * n_in..(k + 1) * n_in];
            for (n, slot) in row.iter_mut().enumerate() {
                *slot = scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos();
            }
        }
        Self { n_in, n_out, rows }
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.n_in);
        debug_assert_eq!(out.len(), self.n_out);
        let mean = input.iter().sum::<f64>() / self.n_in as f64;
        for (k, slot) in out.iter_mut().enumerate() {
            let row = &self.rows[k * self.n_in..(k + 1) * self.n_in];
            *slot = if k == 0 {
                row.iter().zip(input).map(|(r, x)| r * x).sum()
            } else {
                row.iter().zip(input).map(|(r, x)| r * (x - mean)).sum()
            };
        }
    }
}
