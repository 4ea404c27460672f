//! Centered short-time Fourier transform with a periodic Hann window.
//!
//! Frame `i` is centered on sample `i * hop`; the signal is zero-padded by
//! `n_fft / 2` on both sides, giving `ceil(len / hop)` frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        assert!(n_fft >= 2 && hop >= 1, "degenerate STFT geometry");
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// One-sided spectra, one row per frame.
    pub fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex64>> {
        let frames = frame_count(samples.len(), self.hop);
        let half = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        (0..frames)
            .map(|f| {
                let start = (f * self.hop) as isize - half;
                for (k, slot) in buf.iter_mut().enumerate() {
                    let idx = start + k as isize;
                    let s = if idx >= 0 && (idx as usize) < samples.len() {
                        samples[idx as usize]
                    } else {
                        0.0
                    };
                    *slot = Complex64::new(s * self.window[k], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`], trimmed to `out_len`
    /// samples starting at the first frame center.
    pub fn synthesize(&self, spectra: &[Vec<Complex64>], out_len: usize) -> Vec<f64> {
        let half = self.n_fft / 2;
        let total = spectra.len().saturating_sub(1) * self.hop + self.n_fft;
        let mut acc = vec![0.0; total.max(out_len + half)];
        let mut norm = vec![0.0; acc.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for (f, spec) in spectra.iter().enumerate() {
            debug_assert_eq!(spec.len(), self.n_bins());
            for k in 0..self.n_fft {
                buf[k] = if k < spec.len() {
                    spec[k]
                } else {
                    spec[self.n_fft - k].conj()
                };
            }
            // the DC and Nyquist bins must be real for a real signal
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[half].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for k in 0..self.n_fft {
                let w = self.window[k];
                acc[start + k] += buf[k].re * scale * w;
                norm[start + k] += w * w;
            }
        }
        (0..out_len)
            .map(|i| {
                let j = i + half;
                if norm[j] > 1e-10 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
