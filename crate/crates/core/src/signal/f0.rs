use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Periodicity threshold on the cumulative-mean-normalized difference.
pub const YIN_THRESHOLD: f64 = 0.15;

/// Frames quieter than this RMS are never voiced.
const SILENCE_RMS: f64 = 1e-4;

/// Per-frame fundamental frequency; `0.0` marks unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Contour {
    f0_hz: Vec<f64>,
    voiced: Vec<bool>,
}

impl F0Contour {
    /// Build from Hz values; non-positive entries become unvoiced.
    pub fn from_hz(f0_hz: Vec<f64>) -> Result<Self> {
        if f0_hz.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite {
                what: "f0 contour".into(),
                sample: "-".into(),
            });
        }
        let f0_hz: Vec<f64> = f0_hz.into_iter().map(|f| f.max(0.0)).collect();
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        Ok(Self { f0_hz, voiced })
    }

    pub fn unvoiced(len: usize) -> Self {
        Self {
            f0_hz: vec![0.0; len],
            voiced: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn hz(&self) -> &[f64] {
        &self.f0_hz
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    pub fn median_voiced_hz(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.f0_hz.iter().copied().filter(|&f| f > 0.0).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    /// Multiply voiced frames by `2^(semitones / 12)`.
    pub fn shifted_by(&self, semitones: f64) -> Self {
        let ratio = 2f64.powf(semitones / 12.0);
        let f0_hz = self
            .f0_hz
            .iter()
            .zip(&self.voiced)
            .map(|(&f, &v)| if v { f * ratio } else { f })
            .collect();
        Self {
            f0_hz,
            voiced: self.voiced.clone(),
        }
    }

    /// Apply per-frame semitone offsets to voiced frames only.
    pub fn with_semitone_offsets(&self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.len() {
            return Err(Error::shape("offset count differs from contour length"));
        }
        let f0_hz = self
            .f0_hz
            .iter()
            .zip(&self.voiced)
            .zip(offsets)
            .map(|((&f, &v), &o)| if v { f * 2f64.powf(o / 12.0) } else { f })
            .collect();
        Ok(Self {
            f0_hz,
            voiced: self.voiced.clone(),
        })
    }

    /// Nearest-neighbour resample to `len` frames.
    pub fn resampled(&self, len: usize) -> Self {
        let idx = crate::encoders::nn_indices(self.len(), len);
        Self {
            f0_hz: idx.iter().map(|&i| self.f0_hz[i]).collect(),
            voiced: idx.iter().map(|&i| self.voiced[i]).collect(),
        }
    }
}

/// Integer semitone transposition of the voiced frames.
pub fn transpose_f0(c: &F0Contour, semitones: i32) -> F0Contour {
    c.shifted_by(semitones as f64)
}

/// YIN-style monophonic pitch tracker, one estimate per `hop` samples with
/// the same frame centers as the mel analysis.
pub fn extract_f0(w: &Waveform, f_min: f64, f_max: f64, hop: usize) -> Result<F0Contour> {
    let sr = w.sample_rate() as f64;
    if !(f_min > 0.0 && f_min < f_max) {
        return Err(Error::invalid(format!("need 0 < f_min < f_max, got {f_min}, {f_max}")));
    }
    if f_max > sr / 2.0 {
        return Err(Error::invalid(format!("f_max {f_max} Hz above Nyquist {}", sr / 2.0)));
    }
    if hop == 0 {
        return Err(Error::invalid("hop must be positive"));
    }
    let tau_min = ((sr / f_max).floor() as usize).max(2);
    let tau_max = (sr / f_min).ceil() as usize;
    let win = tau_max;
    let x = w.samples();
    let frames = x.len().div_ceil(hop);

    let fft_len = (2 * win + tau_max).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let mut f0 = Vec::with_capacity(frames);
    let mut seg = vec![0.0; win + tau_max];
    let mut a = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut b = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut diff = vec![0.0; tau_max + 1];
    for t in 0..frames {
        let start = (t * hop) as isize - win as isize;
        for (j, s) in seg.iter_mut().enumerate() {
            let i = start + j as isize;
            *s = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
        }
        let energy = seg.iter().map(|s| s * s).sum::<f64>() / seg.len() as f64;
        if energy.sqrt() < SILENCE_RMS {
            f0.push(0.0);
            continue;
        }

        // cross term sum_j seg[j] * seg[j + tau] via FFT correlation
        for k in 0..fft_len {
            a[k] = Complex64::new(if k < win { seg[k] } else { 0.0 }, 0.0);
            b[k] = Complex64::new(if k < seg.len() { seg[k] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut a);
        fwd.process(&mut b);
        for k in 0..fft_len {
            b[k] *= a[k].conj();
        }
        inv.process(&mut b);

        let mut sq_prefix = vec![0.0; seg.len() + 1];
        for (j, s) in seg.iter().enumerate() {
            sq_prefix[j + 1] = sq_prefix[j] + s * s;
        }
        let head = sq_prefix[win];
        for (tau, d) in diff.iter_mut().enumerate() {
            let shifted = sq_prefix[tau + win] - sq_prefix[tau];
            let cross = b[tau].re / fft_len as f64;
            *d = (head + shifted - 2.0 * cross).max(0.0);
        }

        f0.push(pick_period(&diff, tau_min, tau_max).map_or(0.0, |tau| {
            let hz = sr / tau;
            if (f_min..=f_max).contains(&hz) {
                hz
            } else {
                0.0
            }
        }));
    }
    F0Contour::from_hz(f0)
}

/// Cumulative-mean normalization, absolute threshold, descent to the local
/// minimum, then parabolic refinement. Returns a fractional lag.
fn pick_period(diff: &[f64], tau_min: usize, tau_max: usize) -> Option<f64> {
    let mut cmnd = vec![1.0; diff.len()];
    let mut running = 0.0;
    for tau in 1..diff.len() {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }
    let mut tau = (tau_min..=tau_max).find(|&t| cmnd[t] < YIN_THRESHOLD)?;
    while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
        tau += 1;
    }
    if tau == 0 || tau + 1 >= cmnd.len() {
        return Some(tau as f64);
    }
    let (l, c, r) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (l - r) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Some(tau as f64 + shift)
}
