use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{tanh, tanh_backward, Linear, Params};

/// Shape of the velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub depth: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 2,
            time_dim: 16,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    inner: Linear,
    outer: Linear,
}

/// Conditional velocity field `(x_t, z, t) -> v`, `T × C` in and out.
///
/// Each frame sees `[x | z | emb(t)]` of itself and both neighbours through a
/// width-3 temporal convolution, followed by `depth` residual tanh blocks and
/// a linear read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    mel_bins: usize,
    cond_dim: usize,
    time_dim: usize,
    input: Linear,
    blocks: Vec<ResBlock>,
    out: Linear,
}

/// Forward intermediates.
#[derive(Debug, Clone)]
pub struct NetCache {
    window: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    inner: Vec<Array2<f64>>,
}

pub fn time_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for k in 0..half {
        let omega = if half > 1 {
            (100f64.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        e[k] = (omega * t).sin();
        e[half + k] = (omega * t).cos();
    }
    e
}

impl VelocityNet {
    pub fn new(mel_bins: usize, cond_dim: usize, cfg: &NetConfig) -> Result<Self> {
        if mel_bins == 0 || cfg.hidden == 0 || cfg.time_dim % 2 != 0 {
            return Err(Error::Config(format!("invalid network shape {cfg:?} for {mel_bins} bins")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let feat = mel_bins + cond_dim + cfg.time_dim;
        let input = Linear::random(cfg.hidden, 3 * feat, 1.0, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|_| ResBlock {
                inner: Linear::random(cfg.hidden, cfg.hidden, 1.0, &mut rng),
                outer: Linear::random(cfg.hidden, cfg.hidden, 0.2, &mut rng),
            })
            .collect();
        let out = Linear::random(mel_bins, cfg.hidden, 0.5, &mut rng);
        Ok(Self {
            mel_bins,
            cond_dim,
            time_dim: cfg.time_dim,
            input,
            blocks,
            out,
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn feat_dim(&self) -> usize {
        self.mel_bins + self.cond_dim + self.time_dim
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, t: f64) -> Result<(Array2<f64>, NetCache)> {
        if x.ncols() != self.mel_bins || z.ncols() != self.cond_dim || x.nrows() != z.nrows() {
            return Err(Error::shape(format!(
                "network expects T×{} state and T×{} condition, got {:?} and {:?}",
                self.mel_bins,
                self.cond_dim,
                x.dim(),
                z.dim()
            )));
        }
        let frames = x.nrows();
        let temb = time_embedding(t, self.time_dim);
        let temb_rows = temb.broadcast((frames, self.time_dim)).expect("broadcast");
        let feats = concatenate(Axis(1), &[x, z, temb_rows]).expect("same rows");
        let f = self.feat_dim();
        let mut window = Array2::zeros((frames, 3 * f));
        for i in 0..frames {
            if i > 0 {
                window.slice_mut(s![i, ..f]).assign(&feats.row(i - 1));
            }
            window.slice_mut(s![i, f..2 * f]).assign(&feats.row(i));
            if i + 1 < frames {
                window.slice_mut(s![i, 2 * f..]).assign(&feats.row(i + 1));
            }
        }
        let mut h = tanh(&self.input.forward(window.view()));
        let mut hidden = vec![h.clone()];
        let mut inner = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let p = tanh(&b.inner.forward(h.view()));
            h = &h + &b.outer.forward(p.view());
            inner.push(p);
            hidden.push(h.clone());
        }
        let v = self.out.forward(h.view());
        Ok((v, NetCache { window, hidden, inner }))
    }

    /// Accumulates parameter gradients for `dL/dv` and returns `dL/dz`.
    pub fn backward(&self, cache: &NetCache, dv: ArrayView2<'_, f64>, grad: &mut VelocityNet) -> Array2<f64> {
        let last = cache.hidden.last().expect("at least one hidden state");
        let mut dh = self.out.backward(last.view(), dv, &mut grad.out);
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let p = &cache.inner[k];
            let dp = b.outer.backward(p.view(), dh.view(), &mut grad.blocks[k].outer);
            let dpre = tanh_backward(p, &dp);
            let h_in = &cache.hidden[k];
            dh = dh + b.inner.backward(h_in.view(), dpre.view(), &mut grad.blocks[k].inner);
        }
        let da = tanh_backward(&cache.hidden[0], &dh);
        let dwin = self.input.backward(cache.window.view(), da.view(), &mut grad.input);
        let f = self.feat_dim();
        let frames = dwin.nrows();
        let (c, d) = (self.mel_bins, self.cond_dim);
        let mut dz = Array2::zeros((frames, d));
        for i in 0..frames {
            let mut row = dz.row_mut(i);
            row += &dwin.slice(s![i, f + c..f + c + d]);
            if i + 1 < frames {
                row += &dwin.slice(s![i + 1, c..c + d]);
            }
            if i > 0 {
                row += &dwin.slice(s![i - 1, 2 * f + c..2 * f + c + d]);
            }
        }
        dz
    }
}

impl Params for VelocityNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.input.visit(f);
        for b in &self.blocks {
            b.inner.visit(f);
            b.outer.visit(f);
        }
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.input.visit_mut(f);
        for b in &mut self.blocks {
            b.inner.visit_mut(f);
            b.outer.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}
