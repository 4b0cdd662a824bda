//! Fully connected layers on top of [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// `x W + b` for a batch `x: [n, in]`, `W: [in, out]`, `b: [1, out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Inserts `{prefix}/w` and `{prefix}/b`, both drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let w = draw(fan_in * fan_out);
    let b = draw(fan_out);
    params.insert(format!("{prefix}/w"), Tensor::matrix(fan_in, fan_out, w)?)?;
    params.insert(format!("{prefix}/b"), Tensor::matrix(1, fan_out, b)?)?;
    Ok(())
}

/// Multi-layer perceptron: hidden layers use `activation`, the last layer is linear.
///
/// Layer `k` owns `{prefix}/l{k}/w` and `{prefix}/l{k}/b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, k: usize) -> String {
        format!("{}/l{k}/w", self.prefix)
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("{}/l{k}/b", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        for k in 0..self.layers() {
            init_linear(
                params,
                &format!("{}/l{k}", self.prefix),
                self.dims[k],
                self.dims[k + 1],
                rng,
            )?;
        }
        Ok(())
    }

    /// All weights and biases zero.
    pub fn init_zero(&self, params: &mut ParamSet) -> Result<()> {
        for k in 0..self.layers() {
            params.insert(self.weight_name(k), Tensor::zeros(&[self.dims[k], self.dims[k + 1]]))?;
            params.insert(self.bias_name(k), Tensor::zeros(&[1, self.dims[k + 1]]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..self.layers() {
            let w = bound.get(&self.weight_name(k))?;
            let b = bound.get(&self.bias_name(k))?;
            h = linear(g, h, w, b)?;
            if k + 1 < self.layers() {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoder_parameter_count() {
        let mlp = Mlp::new("enc", &[10, 64, 64, 32], Activation::Tanh);
        // 10*64+64 + 64*64+64 + 64*32+32
        assert_eq!(mlp.param_count(), 6_944);
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rand::rngs::StdRng::seed_from_u64(0)).unwrap();
        assert_eq!(p.count(), 6_944);
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut p = ParamSet::new();
        init_linear(&mut p, "x", 16, 4, &mut rand::rngs::StdRng::seed_from_u64(1)).unwrap();
        for (_, t) in p.iter() {
            assert!(t.data().iter().all(|v| v.abs() < 0.25));
        }
    }
}
