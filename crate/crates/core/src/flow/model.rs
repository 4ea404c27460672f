use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{NetCache, NetConfig, VelocityNet};
use crate::adaptor::{AdaptorCache, AdaptorParams};
use crate::conditioning::assemble_condition;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::sampler::{TrainablePolicy, VelocityField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub alpha_tau: f64,
    pub adaptor_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            alpha_tau: 0.5,
            adaptor_seed: 2,
        }
    }
}

/// Per-clip conditioning before the adaptor runs: global timbre, the
/// assembled content rows, and the pitch embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInputs {
    pub timbre: Array1<f64>,
    pub content: Array2<f64>,
    pub f0: Array2<f64>,
}

impl CondInputs {
    pub fn frames(&self) -> usize {
        self.content.nrows()
    }
}

/// Trainable part of the converter: pitch-aware timbre adaptor feeding the
/// velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvcModel {
    pub adaptor: AdaptorParams,
    pub net: VelocityNet,
    pub content_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    adaptor: AdaptorCache,
    net: NetCache,
}

impl SvcModel {
    pub fn new(mel_bins: usize, timbre_dim: usize, content_dim: usize, f0_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.adaptor_seed);
        let adaptor = AdaptorParams::new(f0_dim, timbre_dim, cfg.alpha_tau, &mut rng);
        let net = VelocityNet::new(mel_bins, timbre_dim + content_dim + f0_dim, &cfg.net)?;
        Ok(Self {
            adaptor,
            net,
            content_dim,
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.net.mel_bins()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    /// Concatenated `[h_tau | content | f0]` rows.
    pub fn condition(&self, cond: &CondInputs) -> Result<(Array2<f64>, AdaptorCache)> {
        if cond.content.ncols() != self.content_dim {
            return Err(Error::shape(format!(
                "content width {} but model expects {}",
                cond.content.ncols(),
                self.content_dim
            )));
        }
        let (h_tau, cache) = self.adaptor.forward(cond.timbre.view(), cond.f0.view())?;
        let bundle = assemble_condition(h_tau.view(), cond.content.view(), cond.f0.view())?;
        Ok((bundle.features, cache))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, cond: &CondInputs, t: f64) -> Result<(Array2<f64>, ModelCache)> {
        let (z, adaptor) = self.condition(cond)?;
        let (v, net) = self.net.forward(x, z.view(), t)?;
        Ok((v, ModelCache { adaptor, net }))
    }

    pub fn backward(&self, cache: &ModelCache, dv: ArrayView2<'_, f64>, grad: &mut SvcModel) {
        let dz = self.net.backward(&cache.net, dv, &mut grad.net);
        let d = self.adaptor.timbre_dim();
        self.adaptor
            .backward(&cache.adaptor, dz.slice(ndarray::s![.., ..d]), &mut grad.adaptor);
    }
}

impl Params for SvcModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.adaptor.visit(f);
        self.net.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.adaptor.visit_mut(f);
        self.net.visit_mut(f);
    }
}

impl VelocityField for SvcModel {
    type Cond = CondInputs;

    fn velocity(&self, x: ArrayView2<'_, f64>, cond: &CondInputs, t: f64) -> Result<Array2<f64>> {
        Ok(self.forward(x, cond, t)?.0)
    }

    fn state_shape(&self, cond: &CondInputs) -> (usize, usize) {
        (cond.frames(), self.mel_bins())
    }
}

impl TrainablePolicy for SvcModel {
    fn zero_grad(&self) -> Self {
        self.zeros_like()
    }

    fn velocity_vjp(&self, x: ArrayView2<'_, f64>, cond: &CondInputs, t: f64, dv: ArrayView2<'_, f64>, grad: &mut Self) -> Result<()> {
        let (_, cache) = self.forward(x, cond, t)?;
        self.backward(&cache, dv, grad);
        Ok(())
    }
}

impl VelocityField for VelocityNet {
    type Cond = Array2<f64>;

    fn velocity(&self, x: ArrayView2<'_, f64>, cond: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        Ok(self.forward(x, cond.view(), t)?.0)
    }

    fn state_shape(&self, cond: &Array2<f64>) -> (usize, usize) {
        (cond.nrows(), self.mel_bins())
    }
}

impl TrainablePolicy for VelocityNet {
    fn zero_grad(&self) -> Self {
        self.zeros_like()
    }

    fn velocity_vjp(&self, x: ArrayView2<'_, f64>, cond: &Array2<f64>, t: f64, dv: ArrayView2<'_, f64>, grad: &mut Self) -> Result<()> {
        let (_, cache) = self.forward(x, cond.view(), t)?;
        self.backward(&cache, dv, grad);
        Ok(())
    }
}
