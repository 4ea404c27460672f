//! Minimal dense-layer toolkit with hand-written backward passes, a flat
//! parameter view, and an adaptive optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Anything holding trainable `f64` tensors in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Overwrite parameters from a flat vector of matching length.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x = v));
    }

    /// `self += alpha * other` for a structurally identical container.
    fn axpy(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (x, g) in s.iter_mut().zip(&flat[off..off + n]) {
                *x += alpha * g;
            }
            off += n;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }
}

/// `y = x Wᵀ + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// Gaussian weights with std `gain / sqrt(in_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, gain: f64, rng: &mut R) -> Self {
        let scale = gain / (in_dim.max(1) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((out_dim, in_dim), || rng.sample::<f64, _>(StandardNormal) * scale),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(&x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().expect("contiguous"));
        f(self.b.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().expect("contiguous"));
        f(self.b.as_slice_mut().expect("contiguous"));
    }
}

pub fn tanh(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(f64::tanh)
}

/// Backward through `h = tanh(a)` given the forward output `h`.
pub fn tanh_backward(h: &Array2<f64>, dh: &Array2<f64>) -> Array2<f64> {
    dh * &h.mapv(|v| 1.0 - v * v)
}

/// Exponential decay from `peak` to `floor` over `decay_steps`, then flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub decay_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 1e-4,
            floor: 1e-5,
            decay_steps: 60_000,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            floor: lr,
            decay_steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.peak <= 0.0 || self.floor >= self.peak || self.decay_steps == 0 {
            return self.peak.max(0.0);
        }
        let frac = (step as f64 / self.decay_steps as f64).min(1.0);
        (self.peak * (self.floor / self.peak).powf(frac)).max(self.floor)
    }
}

/// Adam-family hyperparameters. `beta1 = 0` gives the momentum-free
/// (RMS-normalized) variant used by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::default(),
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Apply one descent step of `grad` to `params`; returns the learning rate
/// used.
pub fn adam_step<P: Params>(params: &mut P, grad: &P, cfg: &OptimizerConfig, state: &mut OptimizerState) -> f64 {
    let mut g = grad.flatten();
    assert_eq!(g.len(), state.m.len(), "optimizer state does not match parameters");
    if cfg.grad_clip > 0.0 {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    let lr = cfg.schedule.at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = if cfg.beta1 > 0.0 { 1.0 - cfg.beta1.powi(t) } else { 1.0 };
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..g.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    }
    let mut off = 0;
    let (m, v) = (&state.m, &state.v);
    params.visit_mut(&mut |s| {
        for (j, x) in s.iter_mut().enumerate() {
            let i = off + j;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
        }
        off += s.len();
    });
    lr
}
