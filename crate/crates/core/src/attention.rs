//! Top-down modality selection: a key map shared by all modalities, a query
//! read from the uniform-fusion workspace state, dot-product logits and a
//! softmax over the present modalities.

use gwsel_autodiff::nn::{init_linear, linear};
use gwsel_autodiff::{Axis, Bound, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gw::{fuse, uniform_weights};

pub const PREFIX: &str = "attn/";
pub const KEY: &str = "attn/key";
pub const QUERY: &str = "attn/query";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub d: usize,
    pub h: usize,
}

/// Graph nodes produced by [`Attention::attend`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, k]` fusion weights.
    pub alpha: Var,
    /// `[B, k]` key-query dot products.
    pub logits: Var,
    pub z_init: Var,
    pub z: Var,
}

impl Attention {
    pub fn new(d: usize, h: usize) -> Self {
        Self { d, h }
    }

    pub fn param_count(&self) -> usize {
        2 * (self.d * self.h + self.h)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        init_linear(&mut p, KEY, self.d, self.h, rng)?;
        init_linear(&mut p, QUERY, self.d, self.h, rng)?;
        Ok(p)
    }

    pub fn init_zero(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for name in [KEY, QUERY] {
            p.insert(format!("{name}/w"), Tensor::zeros(&[self.d, self.h]))?;
            p.insert(format!("{name}/b"), Tensor::zeros(&[1, self.h]))?;
        }
        Ok(p)
    }

    /// Weights over `latents` (each `[B, d]`, one per present modality).
    pub fn attend(&self, g: &mut Graph, bound: &Bound, latents: &[Var]) -> Result<AttentionOutput> {
        let Some(&first) = latents.first() else {
            return Err(Error::Invalid("attend needs at least one latent".into()));
        };
        let batch = g.value(first).rows();
        let k = latents.len();
        let uniform = g.constant(uniform_weights(batch, k));
        let z_init = fuse(g, latents, uniform)?;

        let (kw, kb) = (bound.get(&format!("{KEY}/w"))?, bound.get(&format!("{KEY}/b"))?);
        let (qw, qb) = (bound.get(&format!("{QUERY}/w"))?, bound.get(&format!("{QUERY}/b"))?);
        let q = linear(g, z_init, qw, qb)?;
        let mut scores = Vec::with_capacity(k);
        for &gi in latents {
            let key = linear(g, gi, kw, kb)?;
            scores.push(g.dot(key, q)?);
        }
        let logits = if k == 1 {
            scores[0]
        } else {
            g.concat(&scores, Axis::Cols)?
        };
        let alpha = g.softmax(logits, Axis::Cols)?;
        let z = fuse(g, latents, alpha)?;
        Ok(AttentionOutput {
            alpha,
            logits,
            z_init,
            z,
        })
    }
}

impl Default for Attention {
    fn default() -> Self {
        Self::new(32, 64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget() {
        let a = Attention::default();
        assert_eq!(a.param_count(), 4_224);
        assert_eq!(a.init_zero().unwrap().count(), 4_224);
    }
}
