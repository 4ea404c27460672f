//! Temporal assembly of the generator's inputs: the random observed/predicted
//! split, content substitution, feature concatenation, and the masked
//! rectified-flow path.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Split of `frames` into an observed prefix `[0, boundary)` and a predicted
/// suffix `[boundary, frames)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPlan {
    t_m: f64,
    frames: usize,
    boundary: usize,
}

impl MaskPlan {
    pub fn new(t_m: f64, frames: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_m) {
            return Err(Error::invalid(format!("mask position {t_m} outside [0, 1]")));
        }
        if frames == 0 {
            return Err(Error::invalid("mask over zero frames"));
        }
        let boundary = ((t_m * frames as f64).floor() as usize).min(frames);
        Ok(Self {
            t_m,
            frames,
            boundary,
        })
    }

    /// Plan with an explicit boundary frame.
    pub fn with_boundary(boundary: usize, frames: usize) -> Result<Self> {
        if frames == 0 || boundary > frames {
            return Err(Error::invalid(format!("boundary {boundary} outside [0, {frames}]")));
        }
        Ok(Self {
            t_m: boundary as f64 / frames as f64,
            frames,
            boundary,
        })
    }

    pub fn t_m(&self) -> f64 {
        self.t_m
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// `m_τ`: 1 on the observed prefix.
    pub fn is_observed(&self, frame: usize) -> bool {
        frame < self.boundary
    }

    /// `m_c`: 1 on the predicted suffix.
    pub fn is_predicted(&self, frame: usize) -> bool {
        frame >= self.boundary
    }

    pub fn predicted_frames(&self) -> usize {
        self.frames - self.boundary
    }
}

/// Draw `t_m ~ U[0, 1]` and place the boundary at `floor(t_m * frames)`.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<MaskPlan> {
    let t_m: f64 = rng.gen_range(0.0..=1.0);
    MaskPlan::new(t_m, frames)
}

fn check_rows(what: &str, m: &ArrayView2<'_, f64>, frames: usize) -> Result<()> {
    if m.nrows() != frames {
        return Err(Error::shape(format!("{what} has {} frames, expected {frames}", m.nrows())));
    }
    Ok(())
}

/// Original content on the observed prefix, shifted content on the rest.
pub fn assemble_content(orig: ArrayView2<'_, f64>, shift: ArrayView2<'_, f64>, mask: &MaskPlan) -> Result<Array2<f64>> {
    check_rows("original content", &orig, mask.frames)?;
    check_rows("shifted content", &shift, mask.frames)?;
    if orig.ncols() != shift.ncols() {
        return Err(Error::shape("content feature widths differ"));
    }
    let b = mask.boundary;
    concatenate(Axis(0), &[orig.slice(s![..b, ..]), shift.slice(s![b.., ..])]).map_err(|e| Error::shape(e.to_string()))
}

/// Per-frame condition `[timbre | content | f0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub features: Array2<f64>,
    pub timbre_dim: usize,
    pub content_dim: usize,
    pub f0_dim: usize,
}

impl ConditioningBundle {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }
}

pub fn assemble_condition(
    h_tau: ArrayView2<'_, f64>,
    h_content: ArrayView2<'_, f64>,
    h_f0: ArrayView2<'_, f64>,
) -> Result<ConditioningBundle> {
    let t = h_tau.nrows();
    check_rows("content condition", &h_content, t)?;
    check_rows("f0 condition", &h_f0, t)?;
    let features = concatenate(Axis(1), &[h_tau, h_content, h_f0]).map_err(|e| Error::shape(e.to_string()))?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "condition".into(),
            sample: "-".into(),
        });
    }
    Ok(ConditioningBundle {
        features,
        timbre_dim: h_tau.ncols(),
        content_dim: h_content.ncols(),
        f0_dim: h_f0.ncols(),
    })
}

/// Network input at flow time `t`: observed frames are clean mel, predicted
/// frames lie on `x_t = (1 - t) m + t ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_t: Array2<f64>,
    pub t: f64,
    pub epsilon: Array2<f64>,
}

/// Point on the straight path between data and noise.
pub fn flow_path(m: ArrayView2<'_, f64>, epsilon: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
    if m.dim() != epsilon.dim() {
        return Err(Error::shape(format!("mel {:?} vs noise {:?}", m.dim(), epsilon.dim())));
    }
    Ok(Array2::from_shape_fn(m.dim(), |ix| (1.0 - t) * m[ix] + t * epsilon[ix]))
}

/// Masked path input. `observed` supplies the prefix rows (usually `m`
/// itself; the contaminated mix during robust fine-tuning).
pub fn masked_mel_with_prefix(
    observed: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    mask: &MaskPlan,
    t: f64,
    epsilon: ArrayView2<'_, f64>,
) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    check_rows("mel", &m, mask.frames)?;
    if observed.dim() != m.dim() {
        return Err(Error::shape("observed prefix differs in shape from target mel"));
    }
    let mut x = flow_path(m, epsilon, t)?;
    x.slice_mut(s![..mask.boundary, ..]).assign(&observed.slice(s![..mask.boundary, ..]));
    Ok(FlowState {
        x_t: x,
        t,
        epsilon: epsilon.to_owned(),
    })
}

pub fn masked_mel(m: ArrayView2<'_, f64>, mask: &MaskPlan, t: f64, epsilon: ArrayView2<'_, f64>) -> Result<FlowState> {
    masked_mel_with_prefix(m, m, mask, t, epsilon)
}

/// Rectified-flow regression target `u = ε - m`.
pub fn velocity_target(m: ArrayView2<'_, f64>, epsilon: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if m.dim() != epsilon.dim() {
        return Err(Error::shape(format!("mel {:?} vs noise {:?}", m.dim(), epsilon.dim())));
    }
    Ok(&epsilon - &m)
}
