//! Additive singing-like test signals: harmonic sources shaped by a formant
//! envelope. Used by fixtures and the toy corpus generator.

use std::f64::consts::PI;

use crate::error::Result;
use crate::signal::Waveform;

/// A resonance of the vocal tract: center frequency and bandwidth in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
    pub gain: f64,
}

impl Formant {
    pub const fn new(freq: f64, bandwidth: f64, gain: f64) -> Self {
        Self {
            freq,
            bandwidth,
            gain,
        }
    }
}

/// Spectral envelope magnitude at `hz`: a parallel bank of second-order
/// resonators, each with unit gain at DC and `F/B` at its peak.
pub fn envelope(formants: &[Formant], hz: f64) -> f64 {
    formants
        .iter()
        .map(|f| {
            let f2 = f.freq * f.freq;
            f.gain * f2 / ((f2 - hz * hz).powi(2) + (f.bandwidth * hz).powi(2)).sqrt()
        })
        .sum()
}

/// Harmonic voice following a per-sample F0 track (Hz; `<= 0` means silence).
/// Harmonic `k` has amplitude `envelope(k·f0) / k`: the formant envelope over
/// a source falling 6 dB per octave, so the fundamental stays audible as in
/// a real voice.
pub fn voice(f0_per_sample: &[f64], formants: &[Formant], sample_rate: u32, level: f64) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(f0_per_sample.len());
    for &f0 in f0_per_sample {
        if f0 <= 0.0 {
            out.push(0.0);
            continue;
        }
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let mut s = 0.0;
        let mut norm = 0.0;
        let mut k = 1;
        while (k as f64) * f0 < nyquist * 0.95 {
            let a = envelope(formants, k as f64 * f0) / k as f64;
            s += a * (k as f64 * phase).sin();
            norm += a * a;
            k += 1;
        }
        out.push(if norm > 0.0 { level * s / norm.sqrt() } else { 0.0 });
    }
    Waveform::new(out, sample_rate)
}

/// Constant-pitch vowel.
pub fn sustained_vowel(f0: f64, formants: &[Formant], secs: f64, sample_rate: u32) -> Result<Waveform> {
    let n = (secs * sample_rate as f64).round() as usize;
    voice(&vec![f0; n], formants, sample_rate, 0.3)
}

pub fn sine(freq: f64, amplitude: f64, secs: f64, sample_rate: u32) -> Result<Waveform> {
    let n = (secs * sample_rate as f64).round() as usize;
    let s = (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin())
        .collect();
    Waveform::new(s, sample_rate)
}

/// An "ah"-like formant set.
pub const VOWEL_A: [Formant; 3] = [
    Formant::new(730.0, 90.0, 1.0),
    Formant::new(1090.0, 110.0, 0.6),
    Formant::new(2440.0, 160.0, 0.25),
];

/// An "ee"-like formant set.
pub const VOWEL_I: [Formant; 3] = [
    Formant::new(270.0, 60.0, 1.0),
    Formant::new(2290.0, 120.0, 0.5),
    Formant::new(3010.0, 180.0, 0.3),
];
