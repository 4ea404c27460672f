//! Separation → conversion → recomposition, plus the reward model the RL
//! stage uses on converted mels.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::encoders::{nn_interp, Encoders};
use crate::error::{Error, Result};
use crate::features::PreparedClip;
use crate::flow::{CondInputs, MultiTrackClip};
use crate::plugins::Separator;
use crate::rl::{content_fidelity, reward_aesthetic, speaker_reward_from_embeddings, AestheticScorer, Prompt, RewardModel};
use crate::sampler::{sample_ode_with_prefix, SamplerConfig, VelocityField};
use crate::signal::{invert_mel, mix_tracks, MelSpectrogram, Waveform, LOG_FLOOR};

/// Largest log-mel value passed to the vocoder; keeps badly trained models
/// from overflowing `exp`.
const LOG_MEL_CEILING: f64 = 12.0;

/// Griffin–Lim decode of a log-mel matrix, trimmed or padded to `len`
/// samples when given.
pub fn decode_mel(enc: &Encoders, mel: ArrayView2<'_, f64>, iters: usize, len: Option<usize>) -> Result<Waveform> {
    let clamped = mel.mapv(|v| if v.is_finite() { v.clamp(LOG_FLOOR.ln(), LOG_MEL_CEILING) } else { LOG_FLOOR.ln() });
    let w = invert_mel(&MelSpectrogram::new(clamped, enc.mel.clone())?, iters)?;
    Ok(match len {
        Some(n) => w.slice(0, n),
        None => w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    /// The input is already a clean lead vocal; skip separation.
    pub vocal_only: bool,
    /// Semitones added to the source F0 before embedding.
    pub transpose: f64,
    pub gamma_inst: f64,
    /// Reference frames used as an observed prompt before the source.
    pub prefix_frames: usize,
    pub griffin_lim_iters: usize,
    pub noise_seed: u64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            vocal_only: false,
            transpose: 0.0,
            gamma_inst: 1.0,
            prefix_frames: 0,
            griffin_lim_iters: 32,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conversion {
    /// Converted vocal before recomposition.
    pub vocal: Waveform,
    /// Final render: the vocal plus `γ_inst` times the instrumental, when
    /// one exists.
    pub output: Waveform,
    pub mel: Array2<f64>,
}

/// Conditioning for converting `source` towards the voice in `reference`,
/// optionally preceded by `prefix` reference frames. Returns the inputs and
/// the reference mel rows to pin.
pub fn conversion_inputs(
    enc: &Encoders,
    source: &PreparedClip,
    reference: &PreparedClip,
    transpose: f64,
    prefix: usize,
) -> Result<(CondInputs, Array2<f64>)> {
    let frames = source.frames();
    let f0 = nn_interp(enc.f0.embed(&source.f0.shifted_by(transpose)).frames.view(), frames)?;
    let p = prefix.min(reference.frames());
    let ref_f0 = nn_interp(enc.f0.embed(&reference.f0).frames.view(), reference.frames())?;
    let cat = |a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>| concatenate(Axis(0), &[a, b]).expect("same width");
    Ok((
        CondInputs {
            timbre: reference.timbre.clone(),
            content: cat(reference.content.slice(s![..p, ..]), source.content.view()),
            f0: cat(ref_f0.slice(s![..p, ..]), f0.view()),
        },
        reference.mel.slice(s![..p, ..]).to_owned(),
    ))
}

/// Convert `input` (a song, or a clean vocal with `vocal_only`) to the
/// voice of `target_ref` with a deterministic ODE sample.
pub fn convert<M: VelocityField<Cond = CondInputs> + ?Sized>(
    model: &M,
    enc: &Encoders,
    sampler: &SamplerConfig,
    input: &Waveform,
    target_ref: &Waveform,
    separator: Option<&dyn Separator>,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    for w in [input, target_ref] {
        if w.sample_rate() != enc.mel.sample_rate {
            return Err(Error::SampleRate {
                expected: enc.mel.sample_rate,
                actual: w.sample_rate(),
            });
        }
    }
    let (lead, inst) = if opts.vocal_only {
        (input.clone(), None)
    } else {
        let sep = separator.ok_or_else(|| {
            Error::Plugin("no separator registered; pass --vocal-only for clean vocal input".into())
        })?;
        let stems = sep.separate(input)?;
        (stems.lead, Some(stems.instrumental))
    };
    let source = PreparedClip::new(enc, "source", lead)?;
    let reference = PreparedClip::new(enc, "reference", target_ref.clone())?;
    let (cond, prefix) = conversion_inputs(enc, &source, &reference, opts.transpose, opts.prefix_frames)?;
    let sampler = SamplerConfig {
        noise_level: 0.0,
        ..sampler.clone()
    };
    let full = sample_ode_with_prefix(model, &cond, &sampler, Some(prefix.view()), opts.noise_seed)?;
    let mel = full.slice(s![prefix.nrows().., ..]).to_owned();
    let vocal = decode_mel(enc, mel.view(), opts.griffin_lim_iters, Some(source.wave.len()))?;
    let output = match inst {
        Some(inst) if opts.gamma_inst != 0.0 => mix_tracks(&vocal, &inst, opts.gamma_inst)?.slice(0, vocal.len()),
        _ => vocal.clone(),
    };
    Ok(Conversion { vocal, output, mel })
}

/// RL prompts: each clip's content and melody sung in the next clip's voice.
pub fn rl_prompts(enc: &Encoders, clips: &[MultiTrackClip]) -> Result<Vec<Prompt<CondInputs>>> {
    let n = clips.len();
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let target = &clips[(i + 1) % n].lead;
            let (cond, _) = conversion_inputs(enc, &c.lead, target, 0.0, 0)?;
            Ok(Prompt {
                id: c.lead.id.clone(),
                cond,
            })
        })
        .collect()
}

/// Rewards for converted mels: aesthetic scorer on the decoded audio,
/// content fidelity against the prompt's content features (standing in for
/// a recogniser), and speaker similarity to the prompt's target timbre.
pub struct SvcRewards<'a> {
    pub encoders: &'a Encoders,
    pub aesthetic: &'a dyn AestheticScorer,
    pub griffin_lim_iters: usize,
}

impl RewardModel<CondInputs> for SvcRewards<'_> {
    fn score(&mut self, _prompt: &str, cond: &CondInputs, samples: &[&Array2<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut comps = vec![Vec::with_capacity(samples.len()); 3];
        for mel in samples {
            let audio = decode_mel(self.encoders, mel.view(), self.griffin_lim_iters, None)?;
            let spec = MelSpectrogram::new(mel.to_owned().mapv(|v| v.clamp(LOG_FLOOR.ln(), LOG_MEL_CEILING)), self.encoders.mel.clone())?;
            let content = self.encoders.content.encode(&spec)?.frames;
            comps[crate::rl::AESTHETIC].push(reward_aesthetic(&audio, self.aesthetic)?);
            comps[crate::rl::INTELLIGIBILITY].push(content_fidelity(content.view(), cond.content.view())?);
            let spk = match self.encoders.timbre.encode(&audio) {
                Ok(e) => speaker_reward_from_embeddings(e.as_slice(), cond.timbre.as_slice().expect("contiguous"))?,
                // A silent render has no timbre to compare.
                Err(_) => 0.0,
            };
            comps[crate::rl::SPEAKER].push(spk);
        }
        Ok(comps)
    }
}
