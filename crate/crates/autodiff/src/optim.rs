use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every tensor of `params` from the gradients of its bound leaf.
    ///
    /// All gradients are validated before anything is written, so a
    /// non-finite gradient leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients, lr: f64) -> Result<()> {
        let mut pending = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            let g = grads
                .get(bound.get(name)?)
                .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter `{name}`")))?;
            if g.shape() != value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}`: grad {:?} vs param {:?}", g.shape(), value.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NanGradient { name: name.to_string() });
            }
            pending.push((name.to_string(), g));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in pending {
            let p = params.get_mut(&name)?;
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `peak / div_factor` to `peak`, then cosine anneal to
/// `peak * final_fraction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_fraction: f64,
}

impl OneCycle {
    pub fn new(total_steps: usize, peak_lr: f64) -> Self {
        Self {
            total_steps,
            peak_lr,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_fraction: 1e-4,
        }
    }

    pub fn warmup_end(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        let start = self.peak_lr / self.div_factor;
        let end = self.peak_lr * self.final_fraction;
        let w = self.warmup_end();
        if step <= w {
            if w == 0 {
                return Ok(self.peak_lr);
            }
            return Ok(start + (self.peak_lr - start) * step as f64 / w as f64);
        }
        let t = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(end + (self.peak_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
