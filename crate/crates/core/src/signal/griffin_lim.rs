use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, MelConfig, MelSpectrogram, LOG_FLOOR};
use super::stft::Stft;
use super::Waveform;
use crate::error::Result;

/// Tikhonov weight relative to the largest diagonal entry of `F Fᵀ`.
const RIDGE: f64 = 1e-4;

/// Regularized right pseudo-inverse `Fᵀ (F Fᵀ + λI)⁻¹` of the mel filterbank,
/// shape `(n_fft/2 + 1) × n_mels`.
pub fn mel_pseudo_inverse(cfg: &MelConfig) -> Array2<f64> {
    let fb = mel_filterbank(cfg);
    let mut gram = fb.dot(&fb.t());
    let n = gram.nrows();
    let lambda = RIDGE * (0..n).map(|i| gram[[i, i]]).fold(0.0, f64::max).max(1e-12);
    for i in 0..n {
        gram[[i, i]] += lambda;
    }
    let chol = cholesky(&gram);
    // solve (F Fᵀ + λI) Y = F, then pinv = Yᵀ
    let mut y = fb.clone();
    for mut col in y.columns_mut() {
        let mut b: Vec<f64> = col.to_vec();
        cholesky_solve(&chol, &mut b);
        for (c, v) in col.iter_mut().zip(b) {
            *c = v;
        }
    }
    y.reversed_axes()
}

fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                l[[i, i]] = (a[[i, i]] - s).max(1e-300).sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    l
}

fn cholesky_solve(l: &Array2<f64>, b: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * b[k]).sum();
        b[i] = (b[i] - s) / l[[i, i]];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * b[k]).sum();
        b[i] = (b[i] - s) / l[[i, i]];
    }
}

/// Griffin-Lim reconstruction from a log-mel spectrogram.
///
/// Starts from zero phase, so the output is a deterministic function of the
/// input and `iters`. Output length is `T * hop`.
pub fn invert_mel(m: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    let cfg = &m.config;
    cfg.validate()?;
    let pinv = mel_pseudo_inverse(cfg);
    let stft = Stft::new(cfg.n_fft, cfg.hop);
    let out_len = m.n_frames() * cfg.hop;

    let magnitude: Vec<Vec<f64>> = m
        .frames
        .rows()
        .into_iter()
        .map(|row| {
            let mel_power: Vec<f64> = row.iter().map(|v| (v.exp() - LOG_FLOOR).max(0.0)).collect();
            (0..pinv.nrows())
                .map(|k| {
                    let p: f64 = pinv.row(k).iter().zip(&mel_power).map(|(a, b)| a * b).sum();
                    p.max(0.0).sqrt()
                })
                .collect()
        })
        .collect();

    let mut spectra: Vec<Vec<Complex64>> = magnitude
        .iter()
        .map(|row| row.iter().map(|&a| Complex64::new(a, 0.0)).collect())
        .collect();
    for _ in 0..iters {
        let x = stft.synthesize(&spectra, out_len);
        let est = stft.analyze(&x);
        for ((spec, mag), est_row) in spectra.iter_mut().zip(&magnitude).zip(&est) {
            for ((s, &a), e) in spec.iter_mut().zip(mag).zip(est_row) {
                let n = e.norm();
                *s = if n > 1e-12 {
                    e * (a / n)
                } else {
                    Complex64::new(a, 0.0)
                };
            }
        }
    }
    let x = stft.synthesize(&spectra, out_len);
    Waveform::new(x, cfg.sample_rate)
}
