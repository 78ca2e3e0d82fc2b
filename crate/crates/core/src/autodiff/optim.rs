//! AdamW with decoupled weight decay: moment estimates follow the raw
//! gradient, decay is applied directly to the parameter after the adaptive
//! step. A non-finite gradient aborts the step before any parameter moves.

use crate::error::{Error, Result};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Optimizer over a fixed list of parameter blocks given by length.
    pub fn new(block_sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all blocks. `params` and `grads` must line up with the
    /// sizes given at construction.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} blocks configured, {} params / {} grads supplied", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adamw",
                    format!("block {i}: expected {} values, got {} params / {} grads", self.m[i].len(), p.len(), g.len()),
                ));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient {bad} in parameter block {i}; step aborted")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + self.lr * self.weight_decay * p[j];
            }
        }
        Ok(())
    }
}
