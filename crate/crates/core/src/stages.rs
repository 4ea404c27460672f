//! Drivers for the three training stages over a loaded corpus.
//!
//! Randomness for supervised step `k` comes from a ChaCha stream keyed by
//! `(seed, k)` alone, so a run resumed from a checkpoint continues exactly
//! as an uninterrupted one would, and pre-training and fine-tuning with
//! augmentation disabled see identical batches and draws.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Stage, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::features::{clean_features, sample_example};
use crate::flow::{
    estimate_channel_scales, example_loss, train_step_cpt, train_step_sft, EbWeightConfig, MultiTrackClip, SvcModel,
};
use crate::nn::{OptimizerState, Params};
use crate::pipeline::{rl_prompts, SvcRewards};
use crate::plugins::{SubprocessAesthetic, SubprocessShifter};
use crate::rl::{rl_train_loop, AestheticScorer, TonalityScorer};

/// Frozen encoders for `cfg`, with the shifter plugin when one is
/// configured.
pub fn build_encoders(cfg: &RunConfig) -> Result<Encoders> {
    let enc = Encoders::new(&cfg.mel, &cfg.encoders)?;
    Ok(match &cfg.plugins.shifter {
        Some(cmd) => enc.with_shifter(Some(Arc::new(SubprocessShifter {
            command: cmd.clone(),
            speakers: cfg.plugins.shifter_speakers.max(1),
        }))),
        None => enc,
    })
}

/// Untrained model wrapped as a step-0 pre-training checkpoint.
pub fn fresh_checkpoint(cfg: &RunConfig, enc: &Encoders) -> Result<Checkpoint> {
    let model = SvcModel::new(cfg.mel.n_mels, enc.timbre_dim(), enc.content_dim(), enc.f0_dim(), &cfg.model)?;
    let n = model.num_params();
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        stage: Stage::Cpt,
        step: 0,
        mel: cfg.mel.clone(),
        encoders: cfg.encoders.clone(),
        model_config: cfg.model.clone(),
        eb: cfg.eb.clone(),
        model,
        optimizer: OptimizerState::new(n),
        reference: None,
    })
}

/// Random stream for supervised step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

/// Per-channel spread of velocity targets over one draw per clip.
pub fn estimate_scales(enc: &Encoders, clips: &[MultiTrackClip], eb: &EbWeightConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut targets = Vec::with_capacity(clips.len());
    for c in clips {
        let feat = clean_features(enc, &c.lead, &mut rng)?;
        targets.push(sample_example(&feat, &mut rng)?.target);
    }
    estimate_channel_scales(targets.iter().map(|t| t.view()), eb.scale_kind)
}

fn check_compatible(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    if cfg.mel != ck.mel || cfg.encoders != ck.encoders {
        return Err(Error::Checkpoint(
            "checkpoint was trained with different mel or encoder settings".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct SupervisedLog<'a> {
    stage: &'a str,
    step: u64,
    loss: f64,
    lr: f64,
    all_observed: usize,
}

fn write_line<T: Serialize>(log: &mut dyn Write, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(log, "{line}").map_err(|e| Error::io("<metrics log>", e))
}

fn save_periodic(dir: Option<&Path>, stage: Stage, ck: &Checkpoint) -> Result<()> {
    match dir {
        Some(d) => ck.save(&d.join(format!("{}_latest.json", stage.name()))),
        None => Ok(()),
    }
}

/// Pre-training (`Stage::Cpt`) or robust fine-tuning (`Stage::Sft`).
///
/// `init` of the same stage resumes it (optimizer state and step count);
/// otherwise only the weights and channel scales carry over.
pub fn run_supervised(
    stage: Stage,
    cfg: &RunConfig,
    enc: &Encoders,
    clips: &[MultiTrackClip],
    init: Checkpoint,
    ckpt_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    if stage == Stage::Rl {
        return Err(Error::invalid("use run_rl for the RL stage"));
    }
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    check_compatible(cfg, &init)?;
    let train = if stage == Stage::Cpt { &cfg.cpt } else { &cfg.sft };
    let mut ck = init;
    if ck.stage != stage {
        ck.stage = stage;
        ck.step = 0;
        ck.optimizer = OptimizerState::new(ck.model.num_params());
        ck.reference = None;
    }
    let scales = if !cfg.eb.channel_scales.is_empty() {
        cfg.eb.channel_scales.clone()
    } else if !ck.eb.channel_scales.is_empty() {
        ck.eb.channel_scales.clone()
    } else {
        estimate_scales(enc, clips, &cfg.eb, cfg.seed)?
    };
    ck.eb = EbWeightConfig {
        channel_scales: scales,
        ..cfg.eb.clone()
    };
    ck.eb.validate(cfg.mel.n_mels)?;
    let batch = train.batch_size.min(clips.len());
    while ck.step < train.steps {
        let mut rng = step_rng(cfg.seed, ck.step);
        let idx = rand::seq::index::sample(&mut rng, clips.len(), batch).into_vec();
        let report = match stage {
            Stage::Cpt => {
                let b: Vec<_> = idx.iter().map(|&i| &clips[i].lead).collect();
                train_step_cpt(&b, &mut ck.model, &mut ck.optimizer, enc, train, &ck.eb, &mut rng)?
            }
            _ => {
                let b: Vec<_> = idx.iter().map(|&i| &clips[i]).collect();
                train_step_sft(&b, &mut ck.model, &mut ck.optimizer, enc, train, &cfg.augment, &ck.eb, &mut rng)?
            }
        };
        ck.step += 1;
        if ck.step % train.log_every.max(1) == 0 || ck.step == train.steps {
            write_line(
                log,
                &SupervisedLog {
                    stage: stage.name(),
                    step: ck.step,
                    loss: report.loss,
                    lr: report.lr,
                    all_observed: report.all_observed,
                },
            )?;
        }
        if train.checkpoint_every > 0 && ck.step % train.checkpoint_every == 0 {
            save_periodic(ckpt_dir, stage, &ck)?;
        }
    }
    Ok(ck)
}

/// Selective-step GRPO from an SFT (or partially trained RL) checkpoint.
/// With zero iterations the input checkpoint is returned untouched.
pub fn run_rl(
    cfg: &RunConfig,
    enc: &Encoders,
    clips: &[MultiTrackClip],
    init: Checkpoint,
    ckpt_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    check_compatible(cfg, &init)?;
    let rl = &cfg.rl;
    let start = if init.stage == Stage::Rl { init.step } else { 0 };
    if start >= rl.iterations {
        return Ok(init);
    }
    let clips: Vec<MultiTrackClip> = clips
        .iter()
        .filter(|c| c.lead.wave.duration_secs() >= rl.min_clip_secs)
        .cloned()
        .collect();
    if clips.is_empty() {
        return Err(Error::invalid(format!("no clips of at least {} s for RL", rl.min_clip_secs)));
    }
    let mut ck = init;
    let reference = match (&ck.reference, ck.stage) {
        (Some(r), Stage::Rl) => r.clone(),
        _ => ck.model.clone(),
    };
    if ck.stage != Stage::Rl {
        ck.stage = Stage::Rl;
        ck.step = 0;
        ck.optimizer = OptimizerState::new(ck.model.num_params());
        ck.reference = Some(reference.clone());
    }
    let prompts = rl_prompts(enc, &clips)?;
    let plugin_scorer = cfg.plugins.aesthetic.as_ref().map(|cmd| SubprocessAesthetic {
        command: cmd.clone(),
        range: cfg.plugins.aesthetic_range,
    });
    let tonality = TonalityScorer::default();
    let scorer: &dyn AestheticScorer = match &plugin_scorer {
        Some(s) => s,
        None => &tonality,
    };
    let mut rewards = SvcRewards {
        encoders: enc,
        aesthetic: scorer,
        griffin_lim_iters: cfg.inference.griffin_lim_iters.min(8),
    };
    let remaining = crate::rl::RlConfig {
        iterations: rl.iterations - start,
        ..rl.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 << 32 | start);
    let eb = ck.eb.clone();
    let aux_weight = rl.aux_flow_weight;
    let mut aux_rng = rng.clone();
    aux_rng.set_stream(1 << 33 | start);
    let aux = |policy: &SvcModel, grad: &mut SvcModel| -> Result<()> {
        if aux_weight <= 0.0 {
            return Ok(());
        }
        let clip = &clips[aux_rng.gen_range(0..clips.len())];
        let feat = clean_features(enc, &clip.lead, &mut aux_rng)?;
        let ex = sample_example(&feat, &mut aux_rng)?;
        example_loss(policy, &ex, &eb, 0.0, Some((grad, aux_weight)))?;
        Ok(())
    };
    let mut step = start;
    let mut opt = std::mem::replace(&mut ck.optimizer, OptimizerState::new(0));
    let mut model = ck.model.clone();
    let base = ck.clone();
    rl_train_loop(
        &mut model,
        &reference,
        &prompts,
        &remaining,
        &cfg.sampler,
        &mut rewards,
        &mut opt,
        &mut rng,
        aux,
        |policy, entry| {
            step += 1;
            let mut rec = serde_json::to_value(entry).map_err(|e| Error::invalid(e.to_string()))?;
            rec["iteration"] = serde_json::json!(step);
            rec["stage"] = serde_json::json!("rl");
            write_line(log, &rec)?;
            if rl.checkpoint_every > 0 && step % rl.checkpoint_every == 0 {
                let mut snap = base.clone();
                snap.model = policy.clone();
                snap.step = step;
                save_periodic(ckpt_dir, Stage::Rl, &snap)?;
            }
            Ok(())
        },
    )?;
    ck.model = model;
    ck.optimizer = opt;
    ck.step = rl.iterations;
    Ok(ck)
}
