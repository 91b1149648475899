//! Parameterized networks: the task model (feature extractor, classifier head,
//! projection head) and the AdaIN autoencoder generators.

mod checkpoint;
mod generator;
mod task;

pub use checkpoint::{Checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use generator::{adain, CycleGenerator, GenArch, Generator};
pub use task::{TaskArch, TaskModel, TaskOutput, TaskVars};

use crate::autograd::{Conv2dSpec, Tape, Var};
use crate::error::{PdenError, Result};
use crate::tensor::{Rng, Tensor};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on `tape`, as differentiable leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(PdenError::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b || ta.shape() != tb.shape() {
                return Err(PdenError::Format(format!(
                    "parameter layout mismatch: {a}{:?} vs {b}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A [`ParamSet`] bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Pairs existing tape variables with parameter names, in order.
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Fan-in scaled normal (He) initialization.
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn push_conv(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) {
    ps.push(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, rng));
    ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn push_dense(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut Rng) {
    ps.push(format!("{name}.w"), he_normal(&[din, dout], din, rng));
    ps.push(format!("{name}.b"), Tensor::zeros(&[dout]));
}

pub(crate) fn conv(tape: &Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, p.var(&format!("{name}.w")), Conv2dSpec { stride, padding: 1 })?;
    tape.add_channel_bias(y, p.var(&format!("{name}.b")))
}

pub(crate) fn dense(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w")))?;
    tape.add_row_bias(y, p.var(&format!("{name}.b")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_variance_matches_fan_in() {
        let mut rng = Rng::new(5);
        let w = he_normal(&[256, 400], 256, &mut rng);
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 256.0;
        assert!((var - expected).abs() / expected < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn layout_check() {
        let mut a = ParamSet::default();
        a.push("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::default();
        b.push("w", Tensor::zeros(&[2, 3]));
        assert!(a.check_layout(&b).is_err());
        assert!(a.check_layout(&a.clone()).is_ok());
    }
}
