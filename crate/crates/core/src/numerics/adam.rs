use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// One moment pair per `(name, element count)`.
    pub fn new(params: &[(&str, usize)], lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        Ok(AdamState {
            names: params.iter().map(|(n, _)| n.to_string()).collect(),
            m: params.iter().map(|&(_, n)| vec![0.0; n]).collect(),
            v: params.iter().map(|&(_, n)| vec![0.0; n]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// Applies one update to `params` (same order as construction).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("adam: parameter count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::contract(format!(
                    "adam: shape mismatch for `{}`",
                    self.names[i]
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter `{}`",
                    self.names[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
