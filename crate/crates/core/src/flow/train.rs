use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{eb_flow_loss_with_weights, eb_weights, EbWeightConfig, LossValue};
use super::model::SvcModel;
use crate::augment::{make_contaminated_batch, SftConfig};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::features::{clean_features, sample_example, ClipFeatures, PreparedClip, TrainExample};
use crate::nn::{adam_step, OptimizerConfig, OptimizerState, Params};
use crate::signal::Waveform;

/// Supervised-stage settings shared by pre-training and robust fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Weight of the extra term that conditions on unshifted content
    /// everywhere; 0 disables it.
    pub consistency_weight: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            batch_size: 80,
            optimizer: OptimizerConfig::default(),
            consistency_weight: 0.0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

/// Random streams for one training sample. Timbre shifting, example
/// sampling, and augmentation draw from separate streams so that disabling
/// augmentation leaves every other draw unchanged.
pub struct SampleStreams {
    pub shift: ChaCha8Rng,
    pub example: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl SampleStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shift: stream(0),
            example: stream(1),
            augment: stream(2),
        }
    }
}

/// Loss (and, when `grad` is given, accumulated gradient scaled by
/// `grad_scale`) for one example.
pub fn example_loss(
    model: &SvcModel,
    ex: &TrainExample,
    eb: &EbWeightConfig,
    consistency_weight: f64,
    grad: Option<(&mut SvcModel, f64)>,
) -> Result<LossValue> {
    let weights = eb_weights(ex.t, model.mel_bins(), eb);
    let (pred, cache) = model.forward(ex.input.view(), &ex.cond, ex.t)?;
    let (loss, dpred) = eb_flow_loss_with_weights(pred.view(), ex.target.view(), &ex.mask, &weights)?;
    let mut value = loss.value;
    let aux = if consistency_weight > 0.0 {
        let (p2, c2) = model.forward(ex.input.view(), &ex.cond_orig, ex.t)?;
        let (l2, d2) = eb_flow_loss_with_weights(p2.view(), ex.target.view(), &ex.mask, &weights)?;
        value += consistency_weight * l2.value;
        Some((c2, d2))
    } else {
        None
    };
    if let Some((g, scale)) = grad {
        model.backward(&cache, (dpred * scale).view(), g);
        if let Some((c2, d2)) = aux {
            model.backward(&c2, (d2 * (scale * consistency_weight)).view(), g);
        }
    }
    Ok(LossValue {
        value,
        all_observed: loss.all_observed,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Samples whose mask left nothing to predict.
    pub all_observed: usize,
}

/// Shared machinery: build features per sample, average the losses, and take
/// one step. Nothing is updated if any sample's loss is non-finite.
fn step_with<F>(
    n: usize,
    model: &mut SvcModel,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    eb: &EbWeightConfig,
    rng: &mut ChaCha8Rng,
    mut make: F,
) -> Result<StepReport>
where
    F: FnMut(usize, &mut SampleStreams) -> Result<ClipFeatures>,
{
    if n == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let mut grad = model.zeros_like();
    let mut total = 0.0;
    let mut all_observed = 0;
    let scale = 1.0 / n as f64;
    for (i, seed) in seeds.into_iter().enumerate() {
        let mut streams = SampleStreams::from_seed(seed);
        let feat = make(i, &mut streams)?;
        let ex = sample_example(&feat, &mut streams.example)?;
        let loss = example_loss(model, &ex, eb, cfg.consistency_weight, Some((&mut grad, scale)))?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                sample: ex.id.clone(),
            });
        }
        all_observed += loss.all_observed as usize;
        total += loss.value * scale;
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            sample: "batch".into(),
        });
    }
    let lr = adam_step(model, &grad, &cfg.optimizer, opt);
    Ok(StepReport {
        step: opt.step,
        loss: total,
        lr,
        all_observed,
    })
}

/// One pre-training step on clean clips.
pub fn train_step_cpt(
    batch: &[&PreparedClip],
    model: &mut SvcModel,
    opt: &mut OptimizerState,
    enc: &Encoders,
    cfg: &TrainConfig,
    eb: &EbWeightConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    step_with(batch.len(), model, opt, cfg, eb, rng, |i, s| clean_features(enc, batch[i], &mut s.shift))
}

/// A lead vocal with an optional harmony/backing track.
#[derive(Debug, Clone)]
pub struct MultiTrackClip {
    pub lead: PreparedClip,
    pub harm: Option<Waveform>,
}

/// One robust fine-tuning step: conditions come from the contaminated mix
/// with perturbed pitch, the target from the clean lead.
#[allow(clippy::too_many_arguments)]
pub fn train_step_sft(
    batch: &[&MultiTrackClip],
    model: &mut SvcModel,
    opt: &mut OptimizerState,
    enc: &Encoders,
    cfg: &TrainConfig,
    sft: &SftConfig,
    eb: &EbWeightConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    step_with(batch.len(), model, opt, cfg, eb, rng, |i, s| {
        let clip = batch[i];
        let ex = make_contaminated_batch(enc, &clip.lead, clip.harm.as_ref(), sft, &mut s.augment, &mut s.shift)?;
        Ok(ex.features)
    })
}

/// Mean loss over fixed examples without updating anything.
pub fn eval_loss(model: &SvcModel, examples: &[TrainExample], eb: &EbWeightConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no evaluation examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(model, ex, eb, 0.0, None)?.value;
    }
    Ok(total / examples.len() as f64)
}
