//! Audio primitives: waveforms, log-mel analysis, pitch tracking, mixing, and
//! a Griffin-Lim fallback vocoder.

mod f0;
mod griffin_lim;
mod mel;
pub mod stft;
pub(crate) mod wav;

pub use f0::{extract_f0, transpose_f0, F0Contour, YIN_THRESHOLD};
pub use griffin_lim::{invert_mel, mel_pseudo_inverse};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig, MelSpectrogram, LOG_FLOOR};
pub use wav::{load_wav, save_wav, WavEncoding};

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "waveform".into(),
                sample: format!("index {i}"),
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Copy of `[start, start + len)`, zero-padded past the end.
    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let samples = (start..start + len)
            .map(|i| self.samples.get(i).copied().unwrap_or(0.0))
            .collect();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn reversed(&self) -> Waveform {
        let mut samples = self.samples.clone();
        samples.reverse();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Scale so the peak magnitude is at most `ceiling`; quieter signals are
    /// left untouched.
    pub fn limit_peak(&self, ceiling: f64) -> Waveform {
        let peak = self.peak();
        if peak <= ceiling || peak == 0.0 {
            return self.clone();
        }
        let g = ceiling / peak;
        Waveform {
            samples: self.samples.iter().map(|s| s * g).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `out[i] = lead[i] + gain * other[i]`, zero-padding the shorter track.
///
/// Used both for harmony contamination and for recomposing a converted vocal
/// with its accompaniment. No clipping is applied.
pub fn mix_tracks(lead: &Waveform, other: &Waveform, gain: f64) -> Result<Waveform> {
    if lead.sample_rate != other.sample_rate {
        return Err(Error::SampleRate {
            expected: lead.sample_rate,
            actual: other.sample_rate,
        });
    }
    let n = lead.len().max(other.len());
    let samples = (0..n)
        .map(|i| {
            let l = lead.samples.get(i).copied().unwrap_or(0.0);
            let o = other.samples.get(i).copied().unwrap_or(0.0);
            l + gain * o
        })
        .collect();
    Waveform::new(samples, lead.sample_rate)
}
