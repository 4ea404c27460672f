use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::Waveform;
use crate::error::{Error, Result};

/// Floor added to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

/// Mel analysis geometry. Defaults: 44.1 kHz, 2048-point window, hop 512,
/// 128 bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl MelConfig {
    /// Reduced geometry used by fast tests and the toy corpus.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            n_fft: 512,
            hop: 128,
            n_mels: 16,
            f_min: 0.0,
            f_max: None,
        }
    }

    pub fn upper_edge(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop == 0 || self.n_fft < 2 || self.n_mels == 0 {
            return Err(Error::Config(format!("degenerate mel config {self:?}")));
        }
        let top = self.upper_edge();
        if !(self.f_min >= 0.0 && self.f_min < top && top <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] outside [0, Nyquist]",
                self.f_min, top
            )));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Center frequency (Hz) of every mel filter.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let lo = hz_to_mel(self.f_min);
        let hi = hz_to_mel(self.upper_edge());
        (1..=self.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, shape `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.upper_edge());
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = bin_hz(k);
        if f <= left || f >= right {
            0.0
        } else if f <= center {
            (f - left) / (center - left)
        } else {
            (right - f) / (right - center)
        }
    })
}

/// Log-mel frames of a waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    /// `T × n_mels` natural-log mel power.
    pub frames: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>, config: MelConfig) -> Result<Self> {
        if frames.ncols() != config.n_mels {
            return Err(Error::shape(format!(
                "mel has {} bins, config says {}",
                frames.ncols(),
                config.n_mels
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::invalid("mel spectrogram needs at least one frame"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "mel frames".into(),
                sample: "-".into(),
            });
        }
        Ok(Self { frames, config })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::SampleRate {
            expected: cfg.sample_rate,
            actual: w.sample_rate(),
        });
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot analyze an empty waveform"));
    }
    let stft = Stft::new(cfg.n_fft, cfg.hop);
    let fb = mel_filterbank(cfg);
    let spectra = stft.analyze(w.samples());
    let mut frames = Array2::zeros((spectra.len(), cfg.n_mels));
    for (t, spec) in spectra.iter().enumerate() {
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let row = fb.row(m);
            let p: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            frames[[t, m]] = (p + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(frames, cfg.clone())
}
