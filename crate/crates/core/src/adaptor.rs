//! Pitch-aware timbre conditioning: a global speaker vector plus a residual
//! predicted from the local pitch embedding.
//!
//! `h_tau[t] = e + alpha * MLP([h_f0[t]; e])` with a single tanh hidden layer
//! of width `2d`. The output layer starts at zero, so an untrained adaptor
//! reproduces the static embedding exactly.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{tanh, tanh_backward, Linear, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorParams {
    pub hidden: Linear,
    pub out: Linear,
    pub alpha_tau: f64,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdaptorCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl AdaptorParams {
    /// Random hidden layer, zero output layer.
    pub fn new<R: Rng + ?Sized>(f0_dim: usize, timbre_dim: usize, alpha_tau: f64, rng: &mut R) -> Self {
        let width = 2 * timbre_dim;
        Self {
            hidden: Linear::random(width, f0_dim + timbre_dim, 1.0, rng),
            out: Linear::zeros(timbre_dim, width),
            alpha_tau,
        }
    }

    pub fn timbre_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn f0_dim(&self) -> usize {
        self.hidden.in_dim() - self.timbre_dim()
    }

    pub fn forward(&self, e_global: ArrayView1<'_, f64>, h_f0: ArrayView2<'_, f64>) -> Result<(Array2<f64>, AdaptorCache)> {
        let d = self.timbre_dim();
        if e_global.len() != d || h_f0.ncols() != self.f0_dim() {
            return Err(Error::shape(format!(
                "adaptor expects ({}, {}) inputs, got ({}, {})",
                self.f0_dim(),
                d,
                h_f0.ncols(),
                e_global.len()
            )));
        }
        if !(self.alpha_tau >= 0.0) {
            return Err(Error::invalid("alpha_tau must be non-negative"));
        }
        let t = h_f0.nrows();
        let e_rows = e_global.broadcast((t, d)).expect("broadcast");
        let input = concatenate(Axis(1), &[h_f0, e_rows]).expect("same rows");
        let hidden = tanh(&self.hidden.forward(input.view()));
        let delta = self.out.forward(hidden.view());
        let out = &delta * self.alpha_tau + &e_rows;
        Ok((out, AdaptorCache { input, hidden }))
    }

    /// Accumulates parameter gradients for `dL/dh_tau`.
    pub fn backward(&self, cache: &AdaptorCache, d_out: ArrayView2<'_, f64>, grad: &mut AdaptorParams) {
        let d_delta = &d_out * self.alpha_tau;
        let d_hidden = self.out.backward(cache.hidden.view(), d_delta.view(), &mut grad.out);
        let d_pre = tanh_backward(&cache.hidden, &d_hidden);
        self.hidden.backward(cache.input.view(), d_pre.view(), &mut grad.hidden);
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }
}

impl Params for AdaptorParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.hidden.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.hidden.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Time-varying timbre rows for a clip.
pub fn adapt_timbre(e_global: &[f64], h_f0: ArrayView2<'_, f64>, params: &AdaptorParams) -> Result<Array2<f64>> {
    Ok(params.forward(Array1::from(e_global.to_vec()).view(), h_f0)?.0)
}

/// Residual `MLP([h_f0; e])` without the `alpha` scaling, for inspection.
pub fn timbre_residual(e_global: &[f64], h_f0: ArrayView2<'_, f64>, params: &AdaptorParams) -> Result<Array2<f64>> {
    let mut unit = params.clone();
    unit.alpha_tau = 1.0;
    let e = Array1::from(e_global.to_vec());
    let (out, _) = unit.forward(e.view(), h_f0)?;
    Ok(out - &e.broadcast((h_f0.nrows(), e.len())).expect("broadcast"))
}
