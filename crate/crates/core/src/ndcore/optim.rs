use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

/// Adam hyperparameters; `weight_decay` is applied decoupled from the
/// gradient moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected first and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters whose `trainable` flag is false are skipped and
    /// keep their moments untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], trainable: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::Argument(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (e, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][e];
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * g;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * g * g;
                let step = c.lr * (m[e] / bc1) / ((v[e] / bc2).sqrt() + c.eps);
                *w -= step + c.lr * c.weight_decay * *w;
            }
        }
        Ok(())
    }
}
