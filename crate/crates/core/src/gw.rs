//! Global workspace: per-modality encoders and decoders around a shared
//! `d`-dimensional latent, simplex-weighted fusion and broadcast.

use gwsel_autodiff::{Activation, Axis, Bound, Graph, Mlp, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;

pub const PREFIX: &str = "gw/";
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GwConfig {
    pub d: usize,
    pub hidden: usize,
    /// Random-fusion softmax temperature.
    pub tau: f64,
}

impl Default for GwConfig {
    fn default() -> Self {
        Self {
            d: 32,
            hidden: 64,
            tau: 1.0,
        }
    }
}

impl GwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 {
            return Err(Error::Config("gw widths must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("gw.tau must be positive".into()));
        }
        Ok(())
    }
}

/// Network layout; parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Gw {
    pub config: GwConfig,
    dims: [usize; 3],
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
}

impl Gw {
    pub fn new(config: GwConfig) -> Self {
        Self::with_dims(config, Modality::ALL.map(Modality::dim))
    }

    /// Workspace over modality latents of widths `dims` (in [`Modality::ALL`] order).
    pub fn with_dims(config: GwConfig, dims: [usize; 3]) -> Self {
        let (d, h) = (config.d, config.hidden);
        let encoders = Modality::ALL
            .iter()
            .map(|m| {
                Mlp::new(
                    format!("{PREFIX}enc/{m}"),
                    &[dims[m.index()], h, h, d],
                    Activation::Tanh,
                )
            })
            .collect();
        let decoders = Modality::ALL
            .iter()
            .map(|m| {
                Mlp::new(
                    format!("{PREFIX}dec/{m}"),
                    &[d, h, h, dims[m.index()]],
                    Activation::Tanh,
                )
            })
            .collect();
        Self {
            config,
            dims,
            encoders,
            decoders,
        }
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.dims[m.index()]
    }

    pub fn encoder(&self, m: Modality) -> &Mlp {
        &self.encoders[m.index()]
    }

    pub fn decoder(&self, m: Modality) -> &Mlp {
        &self.decoders[m.index()]
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for m in Modality::ALL {
            self.encoder(m).init(&mut p, rng)?;
            self.decoder(m).init(&mut p, rng)?;
        }
        Ok(p)
    }

    pub fn init_zero(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for m in Modality::ALL {
            self.encoder(m).init_zero(&mut p)?;
            self.decoder(m).init_zero(&mut p)?;
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.encoders.iter().chain(&self.decoders).map(Mlp::param_count).sum()
    }

    /// `g = E_m(x)` for a batch `x: [B, d_m]`.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, m: Modality, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.dim(m) {
            return Err(Error::Dimension(format!(
                "{m} latent has width {cols}, expected {}",
                self.dim(m)
            )));
        }
        Ok(self.encoder(m).forward(g, bound, x)?)
    }

    pub fn decode(&self, g: &mut Graph, bound: &Bound, m: Modality, z: Var) -> Result<Var> {
        Ok(self.decoder(m).forward(g, bound, z)?)
    }

    /// `D_j(fuse({E_i(x_i)}, alpha))` for every `j` in `targets`.
    pub fn broadcast(
        &self,
        g: &mut Graph,
        bound: &Bound,
        inputs: &[(Modality, Var)],
        alpha: Var,
        targets: &[Modality],
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() || targets.is_empty() {
            return Err(Error::Invalid("broadcast needs non-empty input and target sets".into()));
        }
        let mut latents = Vec::with_capacity(inputs.len());
        for &(m, x) in inputs {
            latents.push(self.encode(g, bound, m, x)?);
        }
        let z = fuse(g, &latents, alpha)?;
        targets.iter().map(|&m| self.decode(g, bound, m, z)).collect()
    }
}

/// Checks every row of a `[B, k]` weight matrix lies on the simplex.
pub fn check_simplex(alpha: &Tensor, k: usize) -> Result<()> {
    let (_, cols) = alpha.dims2()?;
    if cols != k {
        return Err(Error::Invalid(format!("{cols} fusion weights for {k} latents")));
    }
    for (i, row) in alpha.data().chunks(k.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&a| a < 0.0) || (s - 1.0).abs() >= SIMPLEX_TOL {
            return Err(Error::Invalid(format!(
                "fusion weights of row {i} not on the simplex: {row:?}"
            )));
        }
    }
    Ok(())
}

/// `z = tanh(sum_i alpha[:, i] * g_i)` with `alpha: [B, k]` and each `g_i: [B, d]`.
pub fn fuse(g: &mut Graph, latents: &[Var], alpha: Var) -> Result<Var> {
    if latents.is_empty() {
        return Err(Error::Invalid("fuse needs at least one latent".into()));
    }
    check_simplex(g.value(alpha), latents.len())?;
    let mut acc: Option<Var> = None;
    for (i, &gi) in latents.iter().enumerate() {
        let a = if latents.len() == 1 {
            alpha
        } else {
            g.slice(alpha, Axis::Cols, i, 1)?
        };
        let term = g.mul(gi, a)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(g.tanh(acc.expect("non-empty"))?)
}

/// `alpha = softmax(s / tau)` per row with `s ~ U(0, 1)`, shape `[batch, k]`.
pub fn random_fusion_weights<R: Rng + ?Sized>(batch: usize, k: usize, tau: f64, rng: &mut R) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if k == 0 {
        return Err(Error::Invalid("random fusion weights over an empty subset".into()));
    }
    let scores: Vec<f64> = (0..batch * k).map(|_| rng.random::<f64>()).collect();
    Ok(softmax_rows(&scores, k, tau))
}

/// Row-wise `softmax(x / tau)` of a flat `[n, k]` buffer.
pub fn softmax_rows(x: &[f64], k: usize, tau: f64) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let e: Vec<f64> = row.iter().map(|&s| (s / tau - max).exp()).collect();
        let total: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / total));
    }
    Tensor::matrix(x.len() / k, k, out).expect("sized buffer")
}

/// Every row `1/k`.
pub fn uniform_weights(batch: usize, k: usize) -> Tensor {
    Tensor::filled(&[batch, k], 1.0 / k as f64)
}
