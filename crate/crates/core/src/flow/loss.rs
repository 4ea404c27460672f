//! Energy-balanced flow-matching loss.
//!
//! Per-channel weights `w_c(t) = (1/σ_c) (1 + λ s(t) g(c))`, optionally
//! rescaled to mean one over channels, where `σ_c` is the spread of the
//! velocity target in channel `c`, `g` ramps linearly over the top of the
//! channel range, and `s(t) = 3 (1 - t)²` has unit mean on `U[0, 1]`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::conditioning::MaskPlan;
use crate::error::{Error, Result};

/// Lower bound on estimated channel scales.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Which spread statistic feeds `1/σ_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    #[default]
    Std,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbWeightConfig {
    pub lambda: f64,
    pub ramp_start: f64,
    /// Estimated from data before training; empty means uniform.
    pub channel_scales: Vec<f64>,
    pub normalize_mean_one: bool,
    pub scale_kind: ScaleKind,
}

impl Default for EbWeightConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            ramp_start: 0.7,
            channel_scales: Vec::new(),
            normalize_mean_one: true,
            scale_kind: ScaleKind::Std,
        }
    }
}

impl EbWeightConfig {
    pub fn uniform(channels: usize, lambda: f64) -> Self {
        Self {
            lambda,
            channel_scales: vec![1.0; channels],
            ..Default::default()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !(0.0..=1.0).contains(&self.ramp_start) {
            return Err(Error::Config(format!(
                "energy-balance weights need lambda >= 0 and ramp_start in [0, 1], got {} / {}",
                self.lambda, self.ramp_start
            )));
        }
        if !self.channel_scales.is_empty() {
            if self.channel_scales.len() != channels {
                return Err(Error::Config(format!(
                    "{} channel scales for {channels} channels",
                    self.channel_scales.len()
                )));
            }
            if self.channel_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config("channel scales must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-channel spread of velocity targets pooled over frames and samples,
/// floored at [`SCALE_FLOOR`].
pub fn estimate_channel_scales<'a, I>(targets: I, kind: ScaleKind) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let mut count = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for u in targets {
        if mean.is_empty() {
            mean = vec![0.0; u.ncols()];
            m2 = vec![0.0; u.ncols()];
        } else if u.ncols() != mean.len() {
            return Err(Error::shape("velocity targets with differing channel counts"));
        }
        for row in u.rows() {
            count += 1;
            for (c, &x) in row.iter().enumerate() {
                let d = x - mean[c];
                mean[c] += d / count as f64;
                m2[c] += d * (x - mean[c]);
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("cannot estimate channel scales from an empty stream"));
    }
    Ok(m2
        .iter()
        .map(|&s| {
            let var = s / count as f64;
            let v = match kind {
                ScaleKind::Std => var.sqrt(),
                ScaleKind::Variance => var,
            };
            v.max(SCALE_FLOOR)
        })
        .collect())
}

/// Frequency emphasis: zero below `start * (C - 1)`, then linear up to one at
/// the top channel.
pub fn freq_ramp(c: usize, channels: usize, start: f64) -> f64 {
    if channels <= 1 {
        return 0.0;
    }
    let top = (channels - 1) as f64;
    let anchor = start * top;
    let c = c as f64;
    if anchor >= top {
        return if c >= top { 1.0 } else { 0.0 };
    }
    if c <= anchor {
        0.0
    } else {
        ((c - anchor) / (top - anchor)).min(1.0)
    }
}

/// `s(t) = (1 - t)² / E[(1 - t)²] = 3 (1 - t)²`.
pub fn time_factor(t: f64) -> f64 {
    3.0 * (1.0 - t) * (1.0 - t)
}

/// Weights before any normalization.
pub fn eb_weights_raw(t: f64, channels: usize, cfg: &EbWeightConfig) -> Vec<f64> {
    let s = time_factor(t);
    (0..channels)
        .map(|c| {
            let base = cfg.channel_scales.get(c).map_or(1.0, |sigma| 1.0 / sigma.max(SCALE_FLOOR));
            base * (1.0 + cfg.lambda * s * freq_ramp(c, channels, cfg.ramp_start))
        })
        .collect()
}

pub fn eb_weights(t: f64, channels: usize, cfg: &EbWeightConfig) -> Vec<f64> {
    let mut w = eb_weights_raw(t, channels, cfg);
    if cfg.normalize_mean_one {
        let mean = w.iter().sum::<f64>() / channels as f64;
        w.iter_mut().for_each(|x| *x /= mean);
    }
    w
}

/// Loss value plus the flag raised when no frame is predicted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub all_observed: bool,
}

/// Mean over predicted frames of `Σ_c w_c (u_c - v_c)²`, with its gradient
/// with respect to `pred`.
pub fn eb_flow_loss_with_weights(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: &MaskPlan,
    weights: &[f64],
) -> Result<(LossValue, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if pred.nrows() != mask.frames() || weights.len() != pred.ncols() {
        return Err(Error::shape("mask or weights do not match the prediction"));
    }
    let mut grad = Array2::zeros(pred.dim());
    let n = mask.predicted_frames();
    if n == 0 {
        return Ok((
            LossValue {
                value: 0.0,
                all_observed: true,
            },
            grad,
        ));
    }
    let mut total = 0.0;
    for i in mask.boundary()..mask.frames() {
        for (c, &w) in weights.iter().enumerate() {
            let diff = pred[[i, c]] - target[[i, c]];
            total += w * diff * diff;
            grad[[i, c]] = 2.0 * w * diff / n as f64;
        }
    }
    Ok((
        LossValue {
            value: total / n as f64,
            all_observed: false,
        },
        grad,
    ))
}

pub fn eb_flow_loss(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: &MaskPlan,
    t: f64,
    cfg: &EbWeightConfig,
) -> Result<LossValue> {
    let w = eb_weights(t, pred.ncols(), cfg);
    Ok(eb_flow_loss_with_weights(pred, target, mask, &w)?.0)
}
