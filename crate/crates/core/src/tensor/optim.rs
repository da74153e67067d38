use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
///
/// ```text
/// w <- w - lr * wd * w
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Result<Self> {
        if config.lr <= 0.0 || config.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "AdamW needs lr > 0 and weight_decay >= 0, got {} / {}",
                config.lr, config.weight_decay
            )));
        }
        Ok(AdamW {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using each parameter's `grad` slot (a missing gradient is
    /// treated as zero). Parameters must be passed in construction order.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.shapes.len() {
            return Err(Error::dim(
                "adamw_step",
                &[self.shapes.len()],
                &[params.len()],
            ));
        }
        for (p, shape) in params.iter().zip(&self.shapes) {
            if p.shape() != shape.as_slice() {
                return Err(Error::dim("adamw_step", shape, p.shape()));
            }
            if let Some(g) = &p.grad {
                if g.len() != p.len() {
                    return Err(Error::dim("adamw_step grad", p.shape(), &[g.len()]));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                data[i] -= c.lr * c.weight_decay * data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            p.grad = grad;
        }
        Ok(())
    }
}
