//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_max: 4e-4,
            lr_min: 3e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π step / total))`; steps past the end clamp to `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, shapes: &[&Tensor]) -> Self {
        let zeros = || shapes.iter().map(|t| vec![0.0; t.len()]).collect();
        OptimState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One AdamW update: `p ← p − lr·wd·p`, then the bias-corrected Adam step.
    ///
    /// Gradients are checked before anything is modified; a non-finite entry
    /// aborts with the offending parameter's name.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = names.get(i).map_or("<unnamed>", String::as_str);
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }

        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv -= lr * c.weight_decay * *pv;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
