//! Corruptions for robust fine-tuning: pitch-tracker-style errors on the F0
//! contour and harmony leakage mixed into the lead vocal.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{nn_interp, Encoders};
use crate::error::{Error, Result};
use crate::features::{shifted_content, ClipFeatures, PreparedClip};
use crate::signal::{mix_tracks, F0Contour, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub p_jitter: f64,
    pub p_glide: f64,
    pub p_jump: f64,
    pub segments_min: usize,
    pub segments_max: usize,
    /// Per-frame standard deviation of jitter, in semitones.
    pub jitter_sigma: f64,
    /// Frames over which a glide ramps to its final offset.
    pub glide_len: usize,
    /// Largest glide end-point offset, in semitones.
    pub glide_max: f64,
    /// Offsets a jump picks from, in semitones.
    pub jump_delta: Vec<f64>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            p_jitter: 0.1,
            p_glide: 0.1,
            p_jump: 0.3,
            segments_min: 2,
            segments_max: 4,
            jitter_sigma: 0.5,
            glide_len: 20,
            glide_max: 2.0,
            jump_delta: vec![12.0, -12.0, 7.0, -7.0],
        }
    }
}

impl PerturbConfig {
    /// Every kernel probability zero.
    pub fn disabled() -> Self {
        Self {
            p_jitter: 0.0,
            p_glide: 0.0,
            p_jump: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_jitter, self.p_glide, self.p_jump];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!("kernel probabilities {ps:?} must lie in [0, 1] and sum to at most 1")));
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return Err(Error::Config(format!(
                "segment count range [{}, {}] is empty",
                self.segments_min, self.segments_max
            )));
        }
        if !(self.jitter_sigma >= 0.0) || self.glide_len == 0 || !(self.glide_max >= 0.0) {
            return Err(Error::Config("jitter_sigma, glide_len, glide_max must be non-negative (glide_len > 0)".into()));
        }
        if self.p_jump > 0.0 && self.jump_delta.is_empty() {
            return Err(Error::Config("jumps enabled with no jump offsets".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    None,
    Jitter,
    Glide { target: f64 },
    Jump { delta: f64 },
}

/// Pick one kernel for a segment with the configured probabilities.
pub fn draw_kernel<R: Rng + ?Sized>(cfg: &PerturbConfig, rng: &mut R) -> Kernel {
    let u: f64 = rng.gen();
    if u < cfg.p_jitter {
        Kernel::Jitter
    } else if u < cfg.p_jitter + cfg.p_glide {
        Kernel::Glide {
            target: rng.gen_range(-1.0..=1.0) * cfg.glide_max,
        }
    } else if u < cfg.p_jitter + cfg.p_glide + cfg.p_jump {
        Kernel::Jump {
            delta: cfg.jump_delta[rng.gen_range(0..cfg.jump_delta.len())],
        }
    } else {
        Kernel::None
    }
}

/// A perturbed span: frames `start..end` and the kernel applied there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kernel: Kernel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub segments: Vec<Segment>,
    /// The contour had no voiced frame and was returned as is.
    pub all_unvoiced: bool,
}

/// Perturb the contour in semitone space.
///
/// The voiced frames are split into `K` equal strata (in voiced-frame order)
/// and each stratum contributes one random contiguous run, so segments are
/// disjoint by construction. `K` is capped by the number of voiced frames.
pub fn perturb_f0<R: Rng + ?Sized>(c: &F0Contour, cfg: &PerturbConfig, rng: &mut R) -> Result<(F0Contour, PerturbReport)> {
    cfg.validate()?;
    let voiced: Vec<usize> = (0..c.len()).filter(|&i| c.voiced()[i]).collect();
    if voiced.is_empty() {
        return Ok((
            c.clone(),
            PerturbReport {
                segments: Vec::new(),
                all_unvoiced: true,
            },
        ));
    }
    let k = rng.gen_range(cfg.segments_min..=cfg.segments_max).min(voiced.len());
    let jitter = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut offsets = vec![0.0; c.len()];
    let mut segments = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * voiced.len() / k;
        let hi = (s + 1) * voiced.len() / k;
        let a = rng.gen_range(lo..hi);
        let b = rng.gen_range(a..hi);
        let kernel = draw_kernel(cfg, rng);
        for (j, &frame) in voiced[a..=b].iter().enumerate() {
            offsets[frame] = match kernel {
                Kernel::None => 0.0,
                Kernel::Jitter => jitter.sample(rng),
                Kernel::Glide { target } => target * ((j + 1) as f64 / cfg.glide_len as f64).min(1.0),
                Kernel::Jump { delta } => delta,
            };
        }
        segments.push(Segment {
            start: voiced[a],
            end: voiced[b] + 1,
            kernel,
        });
    }
    Ok((
        c.with_semitone_offsets(&offsets)?,
        PerturbReport {
            segments,
            all_unvoiced: false,
        },
    ))
}

/// Robust fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub perturb: PerturbConfig,
    /// Contamination strength is drawn from this range per example...
    pub alpha_range: (f64, f64),
    /// ...unless fixed here.
    pub fixed_alpha: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            perturb: PerturbConfig::default(),
            alpha_range: (0.2, 0.6),
            fixed_alpha: None,
        }
    }
}

impl SftConfig {
    /// No contamination and no pitch corruption.
    pub fn disabled() -> Self {
        Self {
            perturb: PerturbConfig::disabled(),
            alpha_range: (0.0, 0.0),
            fixed_alpha: Some(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perturb.validate()?;
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo <= hi) || self.fixed_alpha.is_some_and(|a| !(a >= 0.0)) {
            return Err(Error::Config(format!("invalid contamination range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SftExample {
    pub features: ClipFeatures,
    pub mix: Waveform,
    pub alpha: f64,
    /// No harmony track was available, so the lead was used alone.
    pub harmony_missing: bool,
    pub perturbation: PerturbReport,
}

/// Conditions from `lead + α·harm` with a perturbed pitch contour; target
/// from the clean lead.
pub fn make_contaminated_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    enc: &Encoders,
    lead: &PreparedClip,
    harm: Option<&Waveform>,
    cfg: &SftConfig,
    aug_rng: &mut R1,
    shift_rng: &mut R2,
) -> Result<SftExample> {
    cfg.validate()?;
    let frames = lead.frames();
    let alpha = match (harm, cfg.fixed_alpha) {
        (None, _) => 0.0,
        (Some(_), Some(a)) => a,
        (Some(_), None) => {
            let (lo, hi) = cfg.alpha_range;
            if hi > lo {
                aug_rng.gen_range(lo..hi)
            } else {
                lo
            }
        }
    };
    // With nothing mixed in, the mix is the lead and its features are
    // already known.
    let (mix, mix_clip) = match harm {
        Some(h) if alpha != 0.0 => {
            let mix = mix_tracks(&lead.wave, h, alpha)?.slice(0, lead.wave.len());
            let clip = PreparedClip::new(enc, lead.id.clone(), mix.clone())?;
            (mix, Some(clip))
        }
        _ => (lead.wave.clone(), None),
    };
    let src = mix_clip.as_ref().unwrap_or(lead);
    if src.frames() != frames {
        return Err(Error::shape(format!("{}: mix has {} frames, lead {frames}", lead.id, src.frames())));
    }
    let (f0, perturbation) = perturb_f0(&src.f0, &cfg.perturb, aug_rng)?;
    let features = ClipFeatures {
        id: lead.id.clone(),
        observed_mel: src.mel.clone(),
        target_mel: lead.mel.clone(),
        content_orig: src.content.clone(),
        content_shift: shifted_content(enc, &src.wave, frames, shift_rng)?,
        f0: nn_interp(enc.f0.embed(&f0).frames.view(), frames)?,
        timbre: src.timbre.clone(),
    };
    Ok(SftExample {
        features,
        mix,
        alpha,
        harmony_missing: harm.is_none(),
        perturbation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn contour(n: usize) -> F0Contour {
        F0Contour::from_hz((0..n).map(|i| if i % 7 == 3 { 0.0 } else { 440.0 }).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let c = contour(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, rep) = perturb_f0(&c, &PerturbConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, c);
        assert!(rep.segments.iter().all(|s| s.kernel == Kernel::None));
    }

    #[test]
    fn octave_jump_doubles() {
        let c = contour(60);
        let cfg = PerturbConfig {
            p_jitter: 0.0,
            p_glide: 0.0,
            p_jump: 1.0,
            jump_delta: vec![12.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, rep) = perturb_f0(&c, &cfg, &mut rng).unwrap();
        for s in &rep.segments {
            for i in s.start..s.end {
                if c.voiced()[i] {
                    assert!((out.hz()[i] - 880.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unvoiced_contour_is_flagged() {
        let c = F0Contour::unvoiced(30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, rep) = perturb_f0(&c, &PerturbConfig::default(), &mut rng).unwrap();
        assert!(rep.all_unvoiced);
        assert_eq!(out, c);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PerturbConfig::default();
        cfg.p_jump = 0.9;
        assert!(cfg.validate().is_err());
        let cfg = PerturbConfig {
            segments_min: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
