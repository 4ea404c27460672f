//! ODE and SDE samplers over a learned velocity field.
//!
//! Time runs backwards from noise (`t ≈ 1`) to data (`t ≈ 0`). The SDE form
//! adds noise `σ_t = a √(t / (1 - t))` and corrects the drift with the score
//! implied by the velocity, which keeps the marginals of the straight-line
//! path intact; each Euler–Maruyama step is then a Gaussian with known mean
//! and variance, which is what the RL stage differentiates.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::gaussian_matrix;
use crate::nn::Params;

/// Anything that maps `(x_t, cond, t)` to a velocity of the same shape as `x_t`.
pub trait VelocityField {
    type Cond;

    fn velocity(&self, x: ArrayView2<'_, f64>, cond: &Self::Cond, t: f64) -> Result<Array2<f64>>;

    /// Shape of the state sampled for `cond`.
    fn state_shape(&self, cond: &Self::Cond) -> (usize, usize);
}

/// A velocity field whose parameters can be trained by backpropagation.
pub trait TrainablePolicy: VelocityField + Params + Clone {
    /// Gradient buffer with the same layout and all zeros.
    fn zero_grad(&self) -> Self;

    /// Accumulates `dvᵀ ∂v/∂θ` at `(x, cond, t)` into `grad`.
    fn velocity_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        cond: &Self::Cond,
        t: f64,
        dv: ArrayView2<'_, f64>,
        grad: &mut Self,
    ) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// `a` in the noise schedule.
    pub noise_level: f64,
    /// Inclusive range of steps eligible for the stochastic transition.
    pub sde_step_range: (usize, usize),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            t_min: 0.01,
            t_max: 0.99,
            noise_level: 0.4,
            sde_step_range: (0, 6),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sde_step_range;
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "sampler needs 0 < t_min < t_max < 1, got {} / {}",
                self.t_min, self.t_max
            )));
        }
        if self.n_steps == 0 || !(self.noise_level >= 0.0) || lo > hi || hi >= self.n_steps {
            return Err(Error::Config(format!(
                "sampler: n_steps {} noise {} sde range [{lo}, {hi}]",
                self.n_steps, self.noise_level
            )));
        }
        Ok(())
    }

    /// Uniform grid from `t_max` down to `t_min`, `n_steps + 1` points.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.n_steps as f64;
        (0..=self.n_steps)
            .map(|k| self.t_max + (self.t_min - self.t_max) * k as f64 / n)
            .collect()
    }
}

/// `σ_t = a √(t / (1 - t))`.
pub fn sigma_schedule(t: f64, a: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) || !(a >= 0.0) {
        return Err(Error::invalid(format!("noise schedule undefined at t={t}, a={a}")));
    }
    Ok(a * (t / (1.0 - t)).sqrt())
}

/// Smallest `t` at which the score is evaluated.
pub const SCORE_T_GUARD: f64 = 1e-6;

/// Marginal score implied by a velocity on the straight path:
/// `-(x + (1 - t) v) / t`.
pub fn score_from_velocity(x: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
    if !(t >= SCORE_T_GUARD) {
        return Err(Error::invalid(format!("score requested at t={t}")));
    }
    if x.dim() != v.dim() {
        return Err(Error::shape("state and velocity differ in shape"));
    }
    Ok(Zip::from(x).and(v).map_collect(|&x, &v| -(x + (1.0 - t) * v) / t))
}

fn check_finite(v: &Array2<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            sample: String::new(),
        })
    }
}

/// Euler step `x + v(x, t_from) (t_to - t_from)`.
pub fn ode_step<M: VelocityField + ?Sized>(
    x: ArrayView2<'_, f64>,
    t_from: f64,
    t_to: f64,
    model: &M,
    cond: &M::Cond,
) -> Result<Array2<f64>> {
    if !(t_from > t_to) {
        return Err(Error::invalid(format!("ODE step must go backwards in time: {t_from} -> {t_to}")));
    }
    let v = model.velocity(x, cond, t_from)?;
    check_finite(&v, "velocity")?;
    Ok(&x + &(v * (t_to - t_from)))
}

/// One stochastic transition, with everything needed to re-score it under
/// other parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x_in: Array2<f64>,
    pub x_out: Array2<f64>,
    pub t_from: f64,
    pub t_to: f64,
    pub sigma: f64,
}

impl Transition {
    pub fn dt(&self) -> f64 {
        self.t_to - self.t_from
    }

    /// Per-entry variance `σ² |Δt|`.
    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma * self.dt().abs()
    }

    /// `∂μ/∂v`, a scalar since the mean is affine in the velocity.
    pub fn mean_slope(&self) -> f64 {
        let t = self.t_from;
        self.dt() * (1.0 + self.sigma * self.sigma * (1.0 - t) / (2.0 * t))
    }

    /// Euler–Maruyama mean for velocity `v` at the input state.
    pub fn mean(&self, v: ArrayView2<'_, f64>) -> Array2<f64> {
        sde_mean(self.x_in.view(), v, self.t_from, self.t_to, self.sigma)
    }
}

/// `x + (v - σ²/2 · score) Δt`.
pub fn sde_mean(x: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, t_from: f64, t_to: f64, sigma: f64) -> Array2<f64> {
    let dt = t_to - t_from;
    let c = sigma * sigma / (2.0 * t_from);
    Zip::from(x)
        .and(v)
        .map_collect(|&x, &v| x + (v + c * (x + (1.0 - t_from) * v)) * dt)
}

/// Sum over entries of `log N(x; μ, var)`.
pub fn gaussian_logprob(x: ArrayView2<'_, f64>, mu: ArrayView2<'_, f64>, var: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = Zip::from(x).and(mu).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    -sq / (2.0 * var) - 0.5 * n * (2.0 * PI * var).ln()
}

/// Result of one stochastic step.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub state: Array2<f64>,
    pub logprob: f64,
    pub transition: Transition,
}

/// Euler–Maruyama step with explicit standard-normal draws `z`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step_with_noise<M: VelocityField + ?Sized>(
    x: ArrayView2<'_, f64>,
    t_from: f64,
    t_to: f64,
    model: &M,
    cond: &M::Cond,
    a: f64,
    z: ArrayView2<'_, f64>,
) -> Result<SdeStep> {
    if !(t_from > t_to) {
        return Err(Error::invalid(format!("SDE step must go backwards in time: {t_from} -> {t_to}")));
    }
    if !(a > 0.0) {
        return Err(Error::invalid("SDE step needs a > 0; use the ODE step for a = 0"));
    }
    if z.dim() != x.dim() {
        return Err(Error::shape("noise and state differ in shape"));
    }
    let sigma = sigma_schedule(t_from, a)?;
    let v = model.velocity(x, cond, t_from)?;
    check_finite(&v, "velocity")?;
    let mu = sde_mean(x, v.view(), t_from, t_to, sigma);
    check_finite(&mu, "SDE drift")?;
    let std = sigma * (t_from - t_to).sqrt();
    let state = &mu + &(&z * std);
    let logprob = gaussian_logprob(state.view(), mu.view(), std * std);
    Ok(SdeStep {
        logprob,
        transition: Transition {
            x_in: x.to_owned(),
            x_out: state.clone(),
            t_from,
            t_to,
            sigma,
        },
        state,
    })
}

pub fn sde_step<M: VelocityField + ?Sized, R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    t_from: f64,
    t_to: f64,
    model: &M,
    cond: &M::Cond,
    a: f64,
    rng: &mut R,
) -> Result<SdeStep> {
    let z = gaussian_matrix(x.nrows(), x.ncols(), rng);
    sde_step_with_noise(x, t_from, t_to, model, cond, a, z.view())
}

/// Log-density of a recorded transition under `model`, plus the mean it
/// implies.
pub fn transition_logprob<M: VelocityField + ?Sized>(model: &M, cond: &M::Cond, tr: &Transition) -> Result<(f64, Array2<f64>)> {
    let v = model.velocity(tr.x_in.view(), cond, tr.t_from)?;
    let mu = tr.mean(v.view());
    Ok((gaussian_logprob(tr.x_out.view(), mu.view(), tr.variance()), mu))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `n_steps + 1` states; `states[0]` is the initial noise.
    pub states: Vec<Array2<f64>>,
    pub times: Vec<f64>,
    pub stoch_step: Option<usize>,
    /// Recorded stochastic transitions (one per step in the window; empty
    /// for a deterministic trajectory or `a = 0`).
    pub transitions: Vec<Transition>,
    /// Summed log-density of the recorded transitions.
    pub step_logprob: f64,
    pub noise_seed: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has states")
    }
}

pub fn initial_noise(seed: u64, shape: (usize, usize)) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_matrix(shape.0, shape.1, &mut rng)
}

/// Sample with at most one stochastic transition.
pub fn sample_trajectory<M: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    stoch_step: Option<usize>,
    noise_seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_trajectory_windowed(model, cond, cfg, stoch_step, 1, noise_seed, rng)
}

/// Like [`sample_trajectory`], but `window` consecutive steps starting at
/// `stoch_step` are stochastic.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectory_windowed<M: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    stoch_step: Option<usize>,
    window: usize,
    noise_seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    if let Some(k) = stoch_step {
        let (lo, hi) = cfg.sde_step_range;
        if k < lo || k > hi || window == 0 || k + window > cfg.n_steps {
            return Err(Error::invalid(format!(
                "stochastic step {k} (window {window}) outside [{lo}, {hi}] of {} steps",
                cfg.n_steps
            )));
        }
    }
    let times = cfg.time_grid();
    let mut x = initial_noise(noise_seed, model.state_shape(cond));
    let mut states = Vec::with_capacity(times.len());
    let mut transitions = Vec::new();
    let mut logprob = 0.0;
    states.push(x.clone());
    for k in 0..cfg.n_steps {
        let (t0, t1) = (times[k], times[k + 1]);
        let stochastic = cfg.noise_level > 0.0 && stoch_step.is_some_and(|s| k >= s && k < s + window);
        x = if stochastic {
            let step = sde_step(x.view(), t0, t1, model, cond, cfg.noise_level, rng)?;
            logprob += step.logprob;
            transitions.push(step.transition);
            step.state
        } else {
            ode_step(x.view(), t0, t1, model, cond)?
        };
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        times,
        stoch_step,
        transitions,
        step_logprob: logprob,
        noise_seed,
    })
}

/// Deterministic ODE sample; rows `0..prefix.nrows()` of the state are
/// pinned to the noised `prefix` at every step, so the model continues a
/// known opening.
pub fn sample_ode_with_prefix<M: VelocityField + ?Sized>(
    model: &M,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    prefix: Option<ArrayView2<'_, f64>>,
    noise_seed: u64,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let times = cfg.time_grid();
    let eps = initial_noise(noise_seed, model.state_shape(cond));
    let pin = |x: &mut Array2<f64>, t: f64| {
        if let Some(p) = prefix {
            for i in 0..p.nrows().min(x.nrows()) {
                for c in 0..x.ncols() {
                    x[[i, c]] = (1.0 - t) * p[[i, c]] + t * eps[[i, c]];
                }
            }
        }
    };
    let mut x = eps.clone();
    pin(&mut x, times[0]);
    for k in 0..cfg.n_steps {
        x = ode_step(x.view(), times[k], times[k + 1], model, cond)?;
        pin(&mut x, times[k + 1]);
    }
    Ok(x)
}
