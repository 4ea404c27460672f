//! Frozen feature extractors and the timbre-shifter boundary.
//!
//! The content, timbre, and pitch encoders here are deterministic desk-scale
//! stand-ins (fixed-seed projections and spectral statistics). They never
//! change after construction.

use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::stft::Stft;
use crate::signal::{mel_spectrogram, F0Contour, MelConfig, MelSpectrogram, Waveform};

/// Frame-synchronous content features.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeature {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

/// Unit-norm global timbre vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreEmbedding(Vec<f64>);

impl TimbreEmbedding {
    /// Normalizes `v`; fails on a (near) zero vector.
    pub fn from_raw(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::invalid("degenerate timbre embedding (zero norm)"));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &TimbreEmbedding) -> Result<f64> {
        cosine(&self.0, &other.0)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embedding dims {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::invalid("cosine of a zero embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One-hot pitch rows, `T × (bins + 1)`; the last column marks unvoiced.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Embedding {
    pub frames: Array2<f64>,
}

fn projection(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Fixed random linear map of `[mel; Δmel]` per frame.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    proj: Array2<f64>,
    frame_rate: f64,
}

impl ContentEncoder {
    pub fn new(mel: &MelConfig, dim: usize, seed: u64) -> Self {
        Self {
            proj: projection(dim, 2 * mel.n_mels, seed),
            frame_rate: mel.sample_rate as f64 / mel.hop as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn encode(&self, m: &MelSpectrogram) -> Result<ContentFeature> {
        if 2 * m.n_mels() != self.proj.ncols() {
            return Err(Error::shape(format!(
                "content encoder expects {} mel bins, got {}",
                self.proj.ncols() / 2,
                m.n_mels()
            )));
        }
        let x = &m.frames;
        let t = x.nrows();
        let delta = Array2::from_shape_fn(x.dim(), |(i, c)| {
            let prev = x[[i.saturating_sub(1), c]];
            let next = x[[(i + 1).min(t - 1), c]];
            0.5 * (next - prev)
        });
        let stacked = concatenate(Axis(1), &[x.view(), delta.view()]).expect("equal rows");
        Ok(ContentFeature {
            frames: stacked.dot(&self.proj.t()),
            frame_rate: self.frame_rate,
        })
    }
}

/// Long-term mel statistics (per-bin mean, centered across bins, and per-bin
/// std) projected to `dim` and unit-normalized.
#[derive(Debug, Clone)]
pub struct TimbreEncoder {
    mel: MelConfig,
    proj: Array2<f64>,
    min_secs: f64,
}

impl TimbreEncoder {
    pub fn new(mel: &MelConfig, dim: usize, seed: u64) -> Self {
        Self {
            mel: mel.clone(),
            proj: projection(dim, 2 * mel.n_mels, seed),
            min_secs: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.nrows()
    }

    /// Shortest clip that yields a stable embedding.
    pub fn min_secs(&self) -> f64 {
        self.min_secs
    }

    pub fn encode(&self, w: &Waveform) -> Result<TimbreEmbedding> {
        if w.duration_secs() < self.min_secs {
            return Err(Error::invalid(format!(
                "timbre encoder needs >= {} s of audio, got {:.3} s",
                self.min_secs,
                w.duration_secs()
            )));
        }
        let m = mel_spectrogram(w, &self.mel)?;
        let mean = m.frames.mean_axis(Axis(0)).expect("non-empty");
        let std = m.frames.std_axis(Axis(0), 0.0);
        let centered = &mean - mean.mean().expect("non-empty");
        let stats = concatenate(Axis(0), &[centered.view(), std.view()]).expect("1-d");
        TimbreEmbedding::from_raw(self.proj.dot(&stats).to_vec())
    }
}

/// Semitone-bucket quantizer of log-F0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Encoder {
    pub f_min: f64,
    pub bins: usize,
}

impl F0Encoder {
    pub fn new(f_min: f64, bins: usize) -> Result<Self> {
        if bins < 2 || !(f_min > 0.0) {
            return Err(Error::invalid("F0 encoder needs bins >= 2 and f_min > 0"));
        }
        Ok(Self { f_min, bins })
    }

    /// Embedding width, including the reserved unvoiced column.
    pub fn width(&self) -> usize {
        self.bins + 1
    }

    /// Bucket index of a voiced frequency: nearest semitone above `f_min`,
    /// clamped into range.
    pub fn bucket(&self, hz: f64) -> usize {
        let st = (12.0 * (hz / self.f_min).log2()).round();
        st.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn embed(&self, c: &F0Contour) -> F0Embedding {
        let mut frames = Array2::zeros((c.len(), self.width()));
        for (t, (&hz, &v)) in c.hz().iter().zip(c.voiced()).enumerate() {
            let col = if v { self.bucket(hz) } else { self.bins };
            frames[[t, col]] = 1.0;
        }
        F0Embedding { frames }
    }
}

pub fn embed_f0(c: &F0Contour, f_min: f64, bins: usize) -> Result<F0Embedding> {
    Ok(F0Encoder::new(f_min, bins)?.embed(c))
}

/// Converts audio to another singer's timbre while keeping melody and
/// phonetic content.
pub trait TimbreShifter: Send + Sync {
    /// Number of selectable target voices.
    fn speakers(&self) -> usize;
    fn shift(&self, w: &Waveform, speaker: usize) -> Result<Waveform>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityShifter;

impl TimbreShifter for IdentityShifter {
    fn speakers(&self) -> usize {
        1
    }

    fn shift(&self, w: &Waveform, _speaker: usize) -> Result<Waveform> {
        Ok(w.clone())
    }
}

/// Moves the spectral envelope along the frequency axis by a per-speaker warp
/// factor while keeping the harmonic (pitch) structure.
///
/// The envelope comes from cepstral liftering of each STFT frame; each bin is
/// rescaled by `env(f / warp) / env(f)` and the original phase is kept.
#[derive(Debug, Clone)]
pub struct FormantWarpShifter {
    warps: Vec<f64>,
    lifter_secs: f64,
}

impl FormantWarpShifter {
    pub fn new(warps: Vec<f64>) -> Result<Self> {
        if warps.is_empty() || warps.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("warp factors must be positive and non-empty"));
        }
        Ok(Self {
            warps,
            lifter_secs: 0.0012,
        })
    }

    /// `n` voices with warp factors geometrically spaced over `[0.8, 1.25]`.
    pub fn singers(n: usize) -> Self {
        let warps = if n == 1 {
            vec![1.0]
        } else {
            (0..n)
                .map(|i| 0.8 * (1.25f64 / 0.8).powf(i as f64 / (n - 1) as f64))
                .collect()
        };
        Self::new(warps).expect("positive warps")
    }

    pub fn warp(&self, speaker: usize) -> f64 {
        self.warps[speaker]
    }

    pub fn apply_warp(&self, w: &Waveform, warp: f64) -> Result<Waveform> {
        let sr = w.sample_rate() as f64;
        let n_fft = ((0.04 * sr) as usize).next_power_of_two().max(64);
        let stft = Stft::new(n_fft, n_fft / 4);
        let mut spectra = stft.analyze(w.samples());
        let n_bins = stft.n_bins();
        let cutoff = ((self.lifter_secs * sr) as usize).max(2).min(n_fft / 2 - 1);
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n_fft);
        let inv = planner.plan_fft_inverse(n_fft);
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for spec in spectra.iter_mut() {
            // real cepstrum of the log magnitude
            for k in 0..n_fft {
                let b = if k < n_bins { k } else { n_fft - k };
                buf[k] = Complex64::new((spec[b].norm() + 1e-9).ln(), 0.0);
            }
            inv.process(&mut buf);
            for (q, c) in buf.iter_mut().enumerate() {
                let keep = q <= cutoff || q >= n_fft - cutoff;
                *c = if keep { *c / n_fft as f64 } else { Complex64::new(0.0, 0.0) };
            }
            fwd.process(&mut buf);
            let log_env: Vec<f64> = buf[..n_bins].iter().map(|c| c.re).collect();
            for k in 1..n_bins {
                let src = k as f64 / warp;
                let warped = if src >= (n_bins - 1) as f64 {
                    log_env[n_bins - 1]
                } else {
                    let lo = src.floor() as usize;
                    let frac = src - lo as f64;
                    log_env[lo] * (1.0 - frac) + log_env[lo + 1] * frac
                };
                spec[k] *= (warped - log_env[k]).exp();
            }
        }
        Waveform::new(stft.synthesize(&spectra, w.len()), w.sample_rate())
    }
}

impl TimbreShifter for FormantWarpShifter {
    fn speakers(&self) -> usize {
        self.warps.len()
    }

    fn shift(&self, w: &Waveform, speaker: usize) -> Result<Waveform> {
        let warp = *self
            .warps
            .get(speaker)
            .ok_or_else(|| Error::invalid(format!("unknown speaker {speaker}")))?;
        self.apply_warp(w, warp)
    }
}

/// Pick a speaker uniformly and shift `w` to it.
pub fn shift_timbre<R: Rng + ?Sized>(
    w: &Waveform,
    shifter: Option<&dyn TimbreShifter>,
    rng: &mut R,
) -> Result<Waveform> {
    let shifter = shifter.ok_or_else(|| Error::Plugin("no timbre shifter registered".into()))?;
    let n = shifter.speakers();
    if n == 0 {
        return Err(Error::Plugin("timbre shifter exposes no speakers".into()));
    }
    let speaker = rng.gen_range(0..n);
    let out = shifter.shift(w, speaker)?;
    if out.sample_rate() != w.sample_rate() {
        return Err(Error::SampleRate {
            expected: w.sample_rate(),
            actual: out.sample_rate(),
        });
    }
    Ok(out)
}

/// Source row for each output row of a nearest-neighbour resample:
/// `round(j * t_in / target)` with ties to even, clamped to `t_in - 1`.
pub fn nn_indices(t_in: usize, target: usize) -> Vec<usize> {
    (0..target)
        .map(|j| {
            let num = j * t_in;
            let q = num / target;
            let r = num % target;
            let idx = match (2 * r).cmp(&target) {
                std::cmp::Ordering::Less => q,
                std::cmp::Ordering::Greater => q + 1,
                std::cmp::Ordering::Equal => q + (q % 2),
            };
            idx.min(t_in - 1)
        })
        .collect()
}

/// Nearest-neighbour temporal alignment of a frame matrix.
pub fn nn_interp(f: ArrayView2<'_, f64>, target_len: usize) -> Result<Array2<f64>> {
    if f.nrows() == 0 {
        return Err(Error::invalid("nn_interp of an empty frame matrix"));
    }
    if target_len == 0 {
        return Err(Error::invalid("nn_interp target length must be positive"));
    }
    let idx = nn_indices(f.nrows(), target_len);
    Ok(f.select(Axis(0), &idx))
}

/// Encoder settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub content_dim: usize,
    pub timbre_dim: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub f0_bins: usize,
    pub content_seed: u64,
    pub timbre_seed: u64,
    /// Number of voices in the built-in formant-warp shifter.
    pub shifter_speakers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            content_dim: 64,
            timbre_dim: 64,
            f0_min: 50.0,
            f0_max: 1100.0,
            f0_bins: 54,
            content_seed: 11,
            timbre_seed: 13,
            shifter_speakers: 120,
        }
    }
}

/// All frozen extractors plus the registered shifter.
#[derive(Clone)]
pub struct Encoders {
    pub mel: MelConfig,
    pub content: ContentEncoder,
    pub timbre: TimbreEncoder,
    pub f0: F0Encoder,
    pub f0_max: f64,
    pub shifter: Option<Arc<dyn TimbreShifter>>,
}

impl std::fmt::Debug for Encoders {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoders")
            .field("mel", &self.mel)
            .field("content_dim", &self.content.dim())
            .field("timbre_dim", &self.timbre.dim())
            .field("f0", &self.f0)
            .field("shifter", &self.shifter.as_ref().map(|s| s.speakers()))
            .finish()
    }
}

impl Encoders {
    pub fn new(mel: &MelConfig, cfg: &EncoderConfig) -> Result<Self> {
        mel.validate()?;
        Ok(Self {
            mel: mel.clone(),
            content: ContentEncoder::new(mel, cfg.content_dim, cfg.content_seed),
            timbre: TimbreEncoder::new(mel, cfg.timbre_dim, cfg.timbre_seed),
            f0: F0Encoder::new(cfg.f0_min, cfg.f0_bins)?,
            f0_max: cfg.f0_max.min(mel.sample_rate as f64 / 2.0),
            shifter: Some(Arc::new(FormantWarpShifter::singers(cfg.shifter_speakers.max(1)))),
        })
    }

    pub fn with_shifter(mut self, shifter: Option<Arc<dyn TimbreShifter>>) -> Self {
        self.shifter = shifter;
        self
    }

    pub fn mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        mel_spectrogram(w, &self.mel)
    }

    pub fn f0(&self, w: &Waveform) -> Result<F0Contour> {
        crate::signal::extract_f0(w, self.f0.f_min, self.f0_max, self.mel.hop)
    }

    pub fn shift_timbre<R: Rng + ?Sized>(&self, w: &Waveform, rng: &mut R) -> Result<Waveform> {
        shift_timbre(w, self.shifter.as_deref(), rng)
    }

    pub fn timbre_dim(&self) -> usize {
        self.timbre.dim()
    }

    pub fn content_dim(&self) -> usize {
        self.content.dim()
    }

    pub fn f0_dim(&self) -> usize {
        self.f0.width()
    }
}
