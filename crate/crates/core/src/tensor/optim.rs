use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::domain(
                "adam",
                format!("invalid optimizer settings {self:?}"),
            ))
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and zeroes the gradients.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<(), TensorError> {
        if params.len() != self.first.len() {
            return Err(TensorError::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(TensorError::Usage(format!("parameter {i} has no gradient")));
                }
                Some(g) if g.len() != self.first[i].len() => {
                    return Err(TensorError::Shape {
                        op: "adam",
                        lhs: p.shape().to_vec(),
                        rhs: vec![self.first[i].len()],
                    });
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = p.parts_mut();
            let grad = grad.expect("checked above");
            for (((w, g), mi), vi) in data.iter_mut().zip(grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * *g;
                *vi = beta2 * *vi + (1.0 - beta2) * *g * *g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}
