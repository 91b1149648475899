//! Plain SGD and Adam over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{PdenError, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(PdenError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    Ok(())
}

fn check_shapes(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(PdenError::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(PdenError::Shape(format!(
                "gradient for {name}: {:?} vs {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    check_lr(lr)?;
    check_shapes(params, grads)?;
    for (p, g) in params.tensors_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step so one optimizer can follow a parameter set of any layout.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        check_lr(cfg.lr)?;
        Ok(Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * d;
                *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut ps = ParamSet::default();
        ps.push("p", Tensor::scalar(value));
        ps
    }

    #[test]
    fn sgd_definition() {
        let mut ps = single(1.0);
        sgd_step(&mut ps, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((ps.get("p").unwrap().item() - 0.9).abs() < 1e-15);
        sgd_step(&mut ps, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert!((ps.get("p").unwrap().item() - 0.9).abs() < 1e-15);
        assert!(sgd_step(&mut ps, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(sgd_step(&mut ps, &[Tensor::zeros(&[2])], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_for_any_scale() {
        for scale in [1e-6, 1e-2, 1.0, 1e4] {
            let mut ps = single(0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01)).unwrap();
            adam.step(&mut ps, &[Tensor::scalar(scale)]).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
            let expected = 0.01 * scale / (scale + 1e-8);
            assert!((ps.get("p").unwrap().item() + expected).abs() < 1e-15);
            assert!((expected - 0.01).abs() / 0.01 < 1e-2);
        }
    }

    #[test]
    fn adam_rejects_nonpositive_lr() {
        assert!(Adam::new(AdamConfig::with_lr(-1.0)).is_err());
    }
}
