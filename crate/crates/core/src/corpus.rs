//! Multi-track corpus layout and the synthetic toy corpus.
//!
//! A corpus directory holds `<id>.lead.wav`, an optional `<id>.harm.wav`,
//! and `manifest.csv` with columns `id,duration,language`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::features::PreparedClip;
use crate::flow::MultiTrackClip;
use crate::signal::{load_wav, save_wav, WavEncoding, Waveform};
use crate::synth::{voice, Formant, VOWEL_A, VOWEL_I};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub duration: f64,
    pub language: String,
}

pub fn lead_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.lead.wav"))
}

pub fn harm_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.harm.wav"))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let path = dir.join(MANIFEST);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_manifest(dir: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::checkpoint::write_atomic(&path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub clips: usize,
    pub secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            clips: 50,
            secs: 1.0,
            sample_rate: 8000,
            seed: 7,
        }
    }
}

fn scaled(formants: &[Formant; 3], s: f64) -> [Formant; 3] {
    formants.map(|f| Formant::new(f.freq * s, f.bandwidth * s, f.gain))
}

/// A short melody of `notes` sung on alternating vowels by a singer whose
/// formants are scaled by `singer`.
fn sing(midi: &[f64], singer: f64, level: f64, n: usize, sr: u32, vibrato_phase: f64) -> Result<Waveform> {
    let per = n / midi.len();
    let fade = (sr as f64 * 0.005) as usize;
    let mut out = Vec::with_capacity(n);
    for (k, &note) in midi.iter().enumerate() {
        let len = if k + 1 == midi.len() { n - per * k } else { per };
        let f0: Vec<f64> = (0..len)
            .map(|i| {
                let t = (per * k + i) as f64 / sr as f64;
                let semis = note + 0.3 * (2.0 * std::f64::consts::PI * 5.5 * t + vibrato_phase).sin();
                440.0 * 2f64.powf((semis - 69.0) / 12.0)
            })
            .collect();
        let vowel = if k % 2 == 0 { &VOWEL_A } else { &VOWEL_I };
        let seg = voice(&f0, &scaled(vowel, singer), sr, level)?;
        out.extend(seg.samples().iter().enumerate().map(|(i, &x)| {
            let g = (i.min(len - 1 - i) as f64 / fade.max(1) as f64).min(1.0);
            x * g
        }));
    }
    Waveform::new(out, sr)
}

/// Write a deterministic synthetic multi-track corpus into `dir`.
pub fn generate_toy_corpus(dir: &Path, cfg: &ToyCorpusConfig) -> Result<Vec<CorpusEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = (cfg.secs * cfg.sample_rate as f64).round() as usize;
    let mut entries = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let id = format!("toy{i:03}");
        let notes: Vec<f64> = (0..4).map(|_| rng.gen_range(55..=72) as f64).collect();
        let singer = 0.85 * (1.2f64 / 0.85).powf(rng.gen::<f64>());
        let lead = sing(&notes, singer, 0.3, n, cfg.sample_rate, rng.gen_range(0.0..6.28))?;
        let interval = if rng.gen_bool(0.5) { 4.0 } else { 7.0 };
        let harm_notes: Vec<f64> = notes.iter().map(|m| m + interval).collect();
        let harm_singer = 0.85 * (1.2f64 / 0.85).powf(rng.gen::<f64>());
        let harm = sing(&harm_notes, harm_singer, 0.2, n, cfg.sample_rate, rng.gen_range(0.0..6.28))?;
        save_wav(&lead, lead_path(dir, &id), WavEncoding::Int16)?;
        save_wav(&harm, harm_path(dir, &id), WavEncoding::Int16)?;
        entries.push(CorpusEntry {
            id,
            duration: lead.duration_secs(),
            language: "toy".into(),
        });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Load every clip at least `min_secs` long (and long enough for the timbre
/// encoder), with its harmony track when one exists.
pub fn load_corpus(dir: &Path, enc: &Encoders, min_secs: f64) -> Result<Vec<MultiTrackClip>> {
    let min_secs = min_secs.max(enc.timbre.min_secs());
    let mut out = Vec::new();
    for e in read_manifest(dir)? {
        if e.duration < min_secs {
            continue;
        }
        let lead = load_wav(lead_path(dir, &e.id))?;
        if lead.sample_rate() != enc.mel.sample_rate {
            return Err(Error::SampleRate {
                expected: enc.mel.sample_rate,
                actual: lead.sample_rate(),
            });
        }
        let hp = harm_path(dir, &e.id);
        let harm = if hp.exists() { Some(load_wav(&hp)?) } else { None };
        if let Some(h) = &harm {
            if h.sample_rate() != lead.sample_rate() {
                return Err(Error::SampleRate {
                    expected: lead.sample_rate(),
                    actual: h.sample_rate(),
                });
            }
        }
        out.push(MultiTrackClip {
            lead: PreparedClip::new(enc, e.id.clone(), lead)?,
            harm,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no usable clips in {}", dir.display())));
    }
    Ok(out)
}
