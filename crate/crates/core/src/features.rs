//! Per-clip feature extraction and training-example assembly shared by the
//! supervised stages, the RL prompts, and inference.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{assemble_content, masked_mel_with_prefix, sample_mask, velocity_target, MaskPlan};
use crate::encoders::{nn_interp, Encoders};
use crate::error::{Error, Result};
use crate::flow::CondInputs;
use crate::signal::{F0Contour, Waveform};

/// Frozen-encoder outputs for one clip that do not depend on randomness.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub wave: Waveform,
    pub mel: Array2<f64>,
    pub content: Array2<f64>,
    pub f0: F0Contour,
    pub timbre: Array1<f64>,
}

impl PreparedClip {
    pub fn new(enc: &Encoders, id: impl Into<String>, wave: Waveform) -> Result<Self> {
        let mel = enc.mel(&wave)?;
        let frames = mel.n_frames();
        let content = nn_interp(enc.content.encode(&mel)?.frames.view(), frames)?;
        let f0 = enc.f0(&wave)?.resampled(frames);
        let timbre = Array1::from(enc.timbre.encode(&wave)?.as_slice().to_vec());
        Ok(Self {
            id: id.into(),
            wave,
            mel: mel.frames,
            content,
            f0,
            timbre,
        })
    }

    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// Everything needed to draw training examples for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub id: String,
    /// Rows shown to the model on the observed prefix.
    pub observed_mel: Array2<f64>,
    /// Clean mel the flow path is built on.
    pub target_mel: Array2<f64>,
    pub content_orig: Array2<f64>,
    pub content_shift: Array2<f64>,
    pub f0: Array2<f64>,
    pub timbre: Array1<f64>,
}

/// Content features of a timbre-shifted copy of `wave`, aligned to `frames`.
pub fn shifted_content<R: Rng + ?Sized>(enc: &Encoders, wave: &Waveform, frames: usize, rng: &mut R) -> Result<Array2<f64>> {
    let shifted = enc.shift_timbre(wave, rng)?;
    let mel = enc.mel(&shifted)?;
    nn_interp(enc.content.encode(&mel)?.frames.view(), frames)
}

/// Features for plain (unaugmented) training on a prepared clip.
pub fn clean_features<R: Rng + ?Sized>(enc: &Encoders, clip: &PreparedClip, shift_rng: &mut R) -> Result<ClipFeatures> {
    let frames = clip.frames();
    Ok(ClipFeatures {
        id: clip.id.clone(),
        observed_mel: clip.mel.clone(),
        target_mel: clip.mel.clone(),
        content_orig: clip.content.clone(),
        content_shift: shifted_content(enc, &clip.wave, frames, shift_rng)?,
        f0: nn_interp(enc.f0.embed(&clip.f0).frames.view(), frames)?,
        timbre: clip.timbre.clone(),
    })
}

/// One supervised example: masked network input, conditioning, and target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: Array2<f64>,
    pub t: f64,
    pub mask: MaskPlan,
    pub target: Array2<f64>,
    pub cond: CondInputs,
    /// Same example conditioned on unshifted content everywhere; feeds the
    /// optional consistency term.
    pub cond_orig: CondInputs,
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Draw the mask boundary, flow time, and noise, in that order.
pub fn sample_example<R: Rng + ?Sized>(feat: &ClipFeatures, rng: &mut R) -> Result<TrainExample> {
    let frames = feat.target_mel.nrows();
    if feat.observed_mel.dim() != feat.target_mel.dim() {
        return Err(Error::shape(format!(
            "{}: observed mel {:?} vs target {:?}",
            feat.id,
            feat.observed_mel.dim(),
            feat.target_mel.dim()
        )));
    }
    let mask = sample_mask(frames, rng)?;
    let t: f64 = rng.gen_range(0.0..1.0);
    let eps = gaussian_matrix(frames, feat.target_mel.ncols(), rng);
    let state = masked_mel_with_prefix(feat.observed_mel.view(), feat.target_mel.view(), &mask, t, eps.view())?;
    let target = velocity_target(feat.target_mel.view(), eps.view())?;
    let content = assemble_content(feat.content_orig.view(), feat.content_shift.view(), &mask)?;
    Ok(TrainExample {
        id: feat.id.clone(),
        input: state.x_t,
        t,
        mask,
        target,
        cond: CondInputs {
            timbre: feat.timbre.clone(),
            content,
            f0: feat.f0.clone(),
        },
        cond_orig: CondInputs {
            timbre: feat.timbre.clone(),
            content: feat.content_orig.clone(),
            f0: feat.f0.clone(),
        },
    })
}
