//! Group-relative policy optimisation over one stochastic sampling step.
//!
//! Every member of a group starts from the same noise and is stochastic at
//! the same step, so reward differences inside a group are attributable to
//! that single Gaussian transition. Its exact log-density under the current,
//! rollout-time and reference parameters gives the policy ratio and the KL
//! penalty.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, TimbreEncoder};
use crate::error::{Error, Result};
use crate::nn::{adam_step, OptimizerConfig, OptimizerState};
use crate::sampler::{sample_trajectory_windowed, transition_logprob, SamplerConfig, TrainablePolicy, Trajectory};
use crate::signal::stft::Stft;
use crate::signal::Waveform;

/// Floor on the group standard deviation.
pub const ADV_EPS: f64 = 1e-8;

// ---------------------------------------------------------------- rewards

/// Scores content enjoyment and content usefulness on a declared scale.
pub trait AestheticScorer {
    /// `(min, max)` of the raw scores.
    fn range(&self) -> (f64, f64);
    fn score(&self, w: &Waveform) -> Result<(f64, f64)>;
}

/// Mean of the two raw scores mapped affinely from `range` onto `[0, 1]`.
pub fn normalize_aesthetic(ce: f64, cu: f64, range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Config(format!("aesthetic scorer range [{lo}, {hi}] is empty")));
    }
    Ok((((ce + cu) / 2.0 - lo) / (hi - lo)).clamp(0.0, 1.0))
}

pub fn reward_aesthetic(w: &Waveform, scorer: &dyn AestheticScorer) -> Result<f64> {
    let (ce, cu) = scorer.score(w)?;
    normalize_aesthetic(ce, cu, scorer.range())
}

/// Spectral flatness of the average power spectrum: geometric over
/// arithmetic mean, in `(0, 1]`.
pub fn spectral_flatness(w: &Waveform, n_fft: usize) -> f64 {
    let stft = Stft::new(n_fft, n_fft / 2);
    let frames = stft.analyze(w.samples());
    let bins = n_fft / 2 + 1;
    let mut power = vec![0.0; bins];
    for f in &frames {
        for (p, x) in power.iter_mut().zip(f.iter()) {
            *p += x.norm_sqr();
        }
    }
    let floor = 1e-12;
    let n = bins as f64;
    let log_mean = power.iter().map(|p| (p + floor).ln()).sum::<f64>() / n;
    let mean = power.iter().map(|p| p + floor).sum::<f64>() / n;
    (log_mean.exp() / mean).clamp(0.0, 1.0)
}

/// Desk-scale stand-in: tonal signals score high, noise-like ones low.
#[derive(Debug, Clone, Copy)]
pub struct TonalityScorer {
    pub n_fft: usize,
}

impl Default for TonalityScorer {
    fn default() -> Self {
        Self { n_fft: 512 }
    }
}

impl AestheticScorer for TonalityScorer {
    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, w: &Waveform) -> Result<(f64, f64)> {
        let s = 1.0 - spectral_flatness(w, self.n_fft);
        Ok((s, s))
    }
}

pub trait Transcriber {
    fn transcribe(&self, w: &Waveform) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLevel {
    #[default]
    Word,
    Char,
}

fn tokens(s: &str, level: TokenLevel) -> Vec<String> {
    match level {
        TokenLevel::Word => s.split_whitespace().map(str::to_owned).collect(),
        TokenLevel::Char => s.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

/// Edit distance between token sequences divided by the reference length.
pub fn error_rate(reference: &str, hypothesis: &str, level: TokenLevel) -> f64 {
    let r = tokens(reference, level);
    let h = tokens(hypothesis, level);
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    strsim::generic_levenshtein(&r, &h) as f64 / r.len() as f64
}

pub fn reward_intelligibility(w: &Waveform, ref_text: &str, asr: &dyn Transcriber, level: TokenLevel) -> Result<f64> {
    let hyp = asr.transcribe(w)?;
    Ok(1.0 - error_rate(ref_text, &hyp, level).min(1.0))
}

/// Stand-in for intelligibility without a recogniser: `exp(-d)` with `d` the
/// mean squared distance between content features of the output and source.
pub fn content_fidelity(generated: ArrayView2<'_, f64>, source: ArrayView2<'_, f64>) -> Result<f64> {
    if generated.dim() != source.dim() || generated.is_empty() {
        return Err(Error::shape("content features differ in shape"));
    }
    let d = Zip::from(generated)
        .and(source)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / generated.len() as f64;
    Ok((-d).exp())
}

pub trait SpeakerEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

impl SpeakerEmbedder for TimbreEncoder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        Ok(self.encode(w)?.as_slice().to_vec())
    }
}

/// Cosine similarity remapped to `[0, 1]`.
pub fn speaker_reward_from_embeddings(gen: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(((1.0 + cosine(gen, reference)?) / 2.0).clamp(0.0, 1.0))
}

pub fn reward_speaker(gen: &Waveform, reference: &Waveform, embedder: &dyn SpeakerEmbedder) -> Result<f64> {
    speaker_reward_from_embeddings(&embedder.embed(gen)?, &embedder.embed(reference)?)
}

/// Indices of the standard components.
pub const AESTHETIC: usize = 0;
pub const INTELLIGIBILITY: usize = 1;
pub const SPEAKER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub components: Vec<f64>,
    pub total: f64,
}

/// `components[k][i]` is reward `k` of sample `i`.
pub fn aggregate_rewards(components: &[Vec<f64>], weights: &[f64]) -> Result<Vec<RewardVector>> {
    if components.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} reward components but {} weights",
            components.len(),
            weights.len()
        )));
    }
    let n = components.first().map_or(0, Vec::len);
    if components.iter().any(|c| c.len() != n) {
        return Err(Error::shape("reward components differ in length"));
    }
    Ok((0..n)
        .map(|i| {
            let comps: Vec<f64> = components.iter().map(|c| c[i]).collect();
            let total = comps.iter().zip(weights).map(|(r, w)| r * w).sum();
            RewardVector {
                components: comps,
                total,
            }
        })
        .collect())
}

/// `(R - mean) / max(std, ε)` with the population standard deviation.
pub fn group_advantages(totals: &[f64]) -> Result<Vec<f64>> {
    if totals.len() < 2 {
        return Err(Error::invalid("a group needs at least two members"));
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= ADV_EPS {
        return Ok(vec![0.0; totals.len()]);
    }
    Ok(totals.iter().map(|r| (r - mean) / std).collect())
}

// ------------------------------------------------------- ratio and penalty

fn require_stochastic(traj: &Trajectory) -> Result<()> {
    if traj.transitions.is_empty() {
        Err(Error::invalid("trajectory has no stochastic transition"))
    } else {
        Ok(())
    }
}

/// Summed log-density of the trajectory's stochastic transitions.
pub fn trajectory_logprob<P: TrainablePolicy>(model: &P, cond: &P::Cond, traj: &Trajectory) -> Result<f64> {
    require_stochastic(traj)?;
    let mut lp = 0.0;
    for tr in &traj.transitions {
        lp += transition_logprob(model, cond, tr)?.0;
    }
    Ok(lp)
}

/// `π_θ / π_old` of the recorded stochastic transitions.
pub fn policy_ratio<P: TrainablePolicy>(theta: &P, theta_old: &P, cond: &P::Cond, traj: &Trajectory) -> Result<f64> {
    let a = trajectory_logprob(theta, cond, traj)?;
    let b = trajectory_logprob(theta_old, cond, traj)?;
    Ok((a - b).exp())
}

/// Closed-form KL between equal-variance Gaussian transitions, summed over
/// the recorded steps: `‖μ_θ − μ_ref‖² / (2 σ² |Δt|)`.
pub fn kl_penalty<P: TrainablePolicy>(theta: &P, theta_ref: &P, cond: &P::Cond, traj: &Trajectory) -> Result<f64> {
    require_stochastic(traj)?;
    let mut kl = 0.0;
    for tr in &traj.transitions {
        let (_, mu) = transition_logprob(theta, cond, tr)?;
        let (_, mu_ref) = transition_logprob(theta_ref, cond, tr)?;
        kl += gaussian_kl(mu.view(), mu_ref.view(), tr.variance());
    }
    Ok(kl)
}

pub fn gaussian_kl(mu: ArrayView2<'_, f64>, mu_ref: ArrayView2<'_, f64>, var: f64) -> f64 {
    Zip::from(mu).and(mu_ref).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)) / (2.0 * var)
}

// ------------------------------------------------------------------ GRPO

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub beta: f64,
    pub lr: f64,
    pub iterations: u64,
    pub clip_eps: f64,
    /// Turn the ratio clip off entirely.
    pub clip: bool,
    /// Number of consecutive stochastic steps.
    pub s_window: usize,
    pub reward_weights: Vec<f64>,
    /// Weight of a supervised flow-matching term kept alongside the RL
    /// objective; 0 means RL only.
    pub aux_flow_weight: f64,
    pub checkpoint_every: u64,
    pub min_clip_secs: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            prompts_per_step: 8,
            beta: 0.01,
            lr: 1e-5,
            iterations: 800,
            clip_eps: 0.2,
            clip: true,
            s_window: 1,
            reward_weights: vec![1.0, 1.0, 1.0],
            aux_flow_weight: 0.0,
            checkpoint_every: 100,
            min_clip_secs: 5.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 || self.prompts_per_step == 0 || self.s_window == 0 {
            return Err(Error::Config(format!(
                "RL needs group_size >= 2, prompts_per_step >= 1, s_window >= 1 (got {}, {}, {})",
                self.group_size, self.prompts_per_step, self.s_window
            )));
        }
        if !(self.beta >= 0.0) || !(self.clip_eps >= 0.0) || !(self.lr >= 0.0) || !(self.aux_flow_weight >= 0.0) {
            return Err(Error::Config("beta, clip_eps, lr, aux_flow_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            schedule: crate::nn::LrSchedule::constant(self.lr),
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutGroup<C> {
    pub prompt_id: String,
    pub cond: C,
    pub stoch_step: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardVector>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub surrogate: f64,
    pub kl: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub clip_fraction: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub adv_abs_mean: f64,
    pub reward_mean: f64,
    pub component_means: Vec<f64>,
    pub lr: f64,
}

/// Objective value and `-∂J/∂θ` (ready for a descent step), without
/// touching the parameters.
pub fn grpo_objective<P: TrainablePolicy>(
    groups: &[RolloutGroup<P::Cond>],
    policy: &P,
    reference: &P,
    old: &P,
    cfg: &RlConfig,
) -> Result<(GrpoMetrics, P)> {
    let n: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    if n == 0 {
        return Err(Error::invalid("no rollouts to learn from"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = policy.zero_grad();
    let mut m = GrpoMetrics {
        ratio_min: f64::INFINITY,
        ratio_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut clipped = 0usize;
    let mut advs = Vec::with_capacity(n);
    let mut comp_sums: Vec<f64> = Vec::new();
    for g in groups {
        if g.advantages.len() != g.trajectories.len() || g.rewards.len() != g.trajectories.len() {
            return Err(Error::shape(format!("group {} has mismatched rollouts", g.prompt_id)));
        }
        for ((traj, &adv), rew) in g.trajectories.iter().zip(&g.advantages).zip(&g.rewards) {
            require_stochastic(traj)?;
            // Current-policy means and log-density of each recorded step.
            let mut lp = 0.0;
            let mut lp_old = 0.0;
            let mut steps = Vec::with_capacity(traj.transitions.len());
            for tr in &traj.transitions {
                let (l, mu) = transition_logprob(policy, &g.cond, tr)?;
                lp += l;
                lp_old += transition_logprob(old, &g.cond, tr)?.0;
                let (_, mu_ref) = transition_logprob(reference, &g.cond, tr)?;
                steps.push((tr, mu, mu_ref));
            }
            let ratio = (lp - lp_old).exp();
            let unclipped = ratio * adv;
            let clipped_term = if cfg.clip {
                ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
            } else {
                unclipped
            };
            // min(); on ties the unclipped branch carries the gradient.
            let (surr, coef) = if unclipped <= clipped_term {
                (unclipped, adv * ratio)
            } else {
                clipped += 1;
                (clipped_term, 0.0)
            };
            let mut kl = 0.0;
            for (tr, mu, mu_ref) in &steps {
                let var = tr.variance();
                kl += gaussian_kl(mu.view(), mu_ref.view(), var);
                let slope = tr.mean_slope();
                // d/dv of [coef·logπ − β·KL], negated for descent.
                let dv = Zip::from(&tr.x_out).and(mu).and(mu_ref).map_collect(|&x, &mu, &mr| {
                    -inv_n * slope * (coef * (x - mu) - cfg.beta * (mu - mr)) / var
                });
                if coef != 0.0 || cfg.beta != 0.0 {
                    policy.velocity_vjp(tr.x_in.view(), &g.cond, tr.t_from, dv.view(), &mut grad)?;
                }
            }
            if !surr.is_finite() || !kl.is_finite() {
                return Err(Error::NonFinite {
                    what: "GRPO surrogate".into(),
                    sample: g.prompt_id.clone(),
                });
            }
            m.surrogate += inv_n * surr;
            m.kl += inv_n * kl;
            m.ratio_mean += inv_n * ratio;
            m.ratio_min = m.ratio_min.min(ratio);
            m.ratio_max = m.ratio_max.max(ratio);
            m.reward_mean += inv_n * rew.total;
            if comp_sums.is_empty() {
                comp_sums = vec![0.0; rew.components.len()];
            }
            for (s, c) in comp_sums.iter_mut().zip(&rew.components) {
                *s += inv_n * c;
            }
            advs.push(adv);
        }
    }
    m.clip_fraction = clipped as f64 * inv_n;
    m.adv_mean = advs.iter().sum::<f64>() * inv_n;
    m.adv_std = (advs.iter().map(|a| (a - m.adv_mean).powi(2)).sum::<f64>() * inv_n).sqrt();
    m.adv_abs_mean = advs.iter().map(|a| a.abs()).sum::<f64>() * inv_n;
    m.component_means = comp_sums;
    Ok((m, grad))
}

/// One ascent step on `mean(clipped ratio · advantage) − β·KL`. `extra`
/// may add further (descent-direction) gradient before the step. Nothing is
/// updated when the surrogate or gradient is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn grpo_update<P, F>(
    groups: &[RolloutGroup<P::Cond>],
    policy: &mut P,
    reference: &P,
    old: &P,
    cfg: &RlConfig,
    opt: &OptimizerConfig,
    state: &mut OptimizerState,
    mut extra: F,
) -> Result<GrpoMetrics>
where
    P: TrainablePolicy,
    F: FnMut(&P, &mut P) -> Result<()>,
{
    let (mut metrics, mut grad) = grpo_objective(groups, policy, reference, old, cfg)?;
    extra(policy, &mut grad)?;
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            what: "GRPO gradient".into(),
            sample: "batch".into(),
        });
    }
    metrics.lr = adam_step(policy, &grad, opt, state);
    Ok(metrics)
}

// ------------------------------------------------------------------ loop

/// Supplies reward components for the final states of one group.
pub trait RewardModel<C> {
    /// Returns `components[k][i]` for the `G` samples.
    fn score(&mut self, prompt_id: &str, cond: &C, samples: &[&Array2<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// A prompt: identifier plus the conditioning the policy is sampled under.
#[derive(Debug, Clone)]
pub struct Prompt<C> {
    pub id: String,
    pub cond: C,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub prompts: usize,
    pub skipped_prompts: usize,
    #[serde(flatten)]
    pub grpo: GrpoMetrics,
}

/// Roll out `G` trajectories for one prompt, sharing initial noise and the
/// stochastic step.
pub fn rollout_group<P: TrainablePolicy, R: Rng + ?Sized>(
    policy: &P,
    prompt: &Prompt<P::Cond>,
    sampler: &SamplerConfig,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<(usize, Vec<Trajectory>)>
where
    P::Cond: Clone,
{
    let (lo, hi) = sampler.sde_step_range;
    let hi = hi.min(sampler.n_steps.saturating_sub(cfg.s_window));
    if lo > hi {
        return Err(Error::Config(format!(
            "no stochastic step in [{lo}, {}] fits a window of {}",
            sampler.sde_step_range.1, cfg.s_window
        )));
    }
    let step = rng.gen_range(lo..=hi);
    let noise_seed: u64 = rng.gen();
    let mut out = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut member = ChaCha8Rng::seed_from_u64(rng.gen());
        out.push(sample_trajectory_windowed(
            policy,
            &prompt.cond,
            sampler,
            Some(step),
            cfg.s_window,
            noise_seed,
            &mut member,
        )?);
    }
    Ok((step, out))
}

/// Run `cfg.iterations` rollout/update rounds. The rollout policy is
/// snapshotted at the start of every round; `reference` stays fixed.
/// Prompts whose reward call fails with a plugin error are skipped.
/// `on_iter` sees every round's log and may checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn rl_train_loop<P, R, F, X>(
    policy: &mut P,
    reference: &P,
    prompts: &[Prompt<P::Cond>],
    cfg: &RlConfig,
    sampler: &SamplerConfig,
    rewards: &mut dyn RewardModel<P::Cond>,
    state: &mut OptimizerState,
    rng: &mut R,
    mut extra: X,
    mut on_iter: F,
) -> Result<Vec<IterationLog>>
where
    P: TrainablePolicy,
    P::Cond: Clone,
    R: Rng + ?Sized,
    F: FnMut(&P, &IterationLog) -> Result<()>,
    X: FnMut(&P, &mut P) -> Result<()>,
{
    cfg.validate()?;
    sampler.validate()?;
    if prompts.is_empty() && cfg.iterations > 0 {
        return Err(Error::invalid("RL needs at least one prompt"));
    }
    let opt = cfg.optimizer();
    let mut logs = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let old = policy.clone();
        let picks: Vec<usize> = if prompts.len() >= cfg.prompts_per_step {
            rand::seq::index::sample(rng, prompts.len(), cfg.prompts_per_step).into_vec()
        } else {
            (0..cfg.prompts_per_step).map(|_| rng.gen_range(0..prompts.len())).collect()
        };
        let mut groups = Vec::with_capacity(picks.len());
        let mut skipped = 0;
        for &p in &picks {
            let prompt = &prompts[p];
            let (step, trajs) = rollout_group(&old, prompt, sampler, cfg, rng)?;
            let finals: Vec<&Array2<f64>> = trajs.iter().map(Trajectory::final_state).collect();
            let comps = match rewards.score(&prompt.id, &prompt.cond, &finals) {
                Ok(c) => c,
                Err(e) if e.is_plugin() => {
                    eprintln!("warning: skipping prompt {}: {e}", prompt.id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let weights: Vec<f64> = if cfg.reward_weights.len() == comps.len() {
                cfg.reward_weights.clone()
            } else {
                vec![1.0; comps.len()]
            };
            let rewards = aggregate_rewards(&comps, &weights)?;
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            groups.push(RolloutGroup {
                prompt_id: prompt.id.clone(),
                cond: prompt.cond.clone(),
                stoch_step: step,
                trajectories: trajs,
                advantages: group_advantages(&totals)?,
                rewards,
            });
        }
        let grpo = if groups.is_empty() {
            GrpoMetrics::default()
        } else {
            grpo_update(&groups, policy, reference, &old, cfg, &opt, state, &mut extra)?
        };
        let log = IterationLog {
            iteration: it,
            prompts: groups.len(),
            skipped_prompts: skipped,
            grpo,
        };
        on_iter(policy, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
