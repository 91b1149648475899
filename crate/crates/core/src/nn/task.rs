use serde::{Deserialize, Serialize};

use super::{conv, dense, push_conv, push_dense, Bound, ParamSet};
use crate::autograd::{Tape, Var};
use crate::error::{PdenError, Result};
use crate::tensor::{Rng, Tensor};

/// Shape of the task model.
///
/// `F` is a stack of stride-2 3×3 conv blocks (relu) followed by global
/// average pooling, so the feature width is the last conv width. `C` is
/// `d_h → hidden → classes` with relu and a softmax output; `P` is a single
/// dense layer `d_h → proj_dim` followed by row normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    pub proj_dim: usize,
}

impl Default for TaskArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 28,
            conv_channels: vec![16, 32, 64],
            hidden: 64,
            classes: 10,
            proj_dim: 32,
        }
    }
}

impl TaskArch {
    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().expect("at least one conv block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(PdenError::Config(
                "task conv_channels must be nonempty and positive".into(),
            ));
        }
        if self.in_channels == 0 || self.image_size == 0 || self.hidden == 0 || self.proj_dim == 0 {
            return Err(PdenError::Config("task architecture sizes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(PdenError::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Values produced by one task-model forward pass.
#[derive(Clone, Debug)]
pub struct TaskOutput {
    pub features: Tensor,
    pub probs: Tensor,
    pub proj: Tensor,
}

/// Tape handles of a task-model forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TaskVars {
    pub features: Var,
    pub probs: Var,
    pub proj: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub arch: TaskArch,
    pub params: ParamSet,
}

impl TaskModel {
    pub fn init(arch: TaskArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::default();
        let mut cin = arch.in_channels;
        for (i, &c) in arch.conv_channels.iter().enumerate() {
            push_conv(&mut params, &format!("f.conv{i}"), cin, c, 3, rng);
            cin = c;
        }
        let d_h = arch.feature_dim();
        push_dense(&mut params, "c.fc1", d_h, arch.hidden, rng);
        push_dense(&mut params, "c.fc2", arch.hidden, arch.classes, rng);
        push_dense(&mut params, "p.fc", d_h, arch.proj_dim, rng);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: TaskArch, params: ParamSet) -> Result<Self> {
        let template = Self::init(arch.clone(), &mut Rng::new(0))?;
        template.params.check_layout(&params)?;
        Ok(Self { arch, params })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        if shape.len() != 4 || shape[1] != a.in_channels || shape[2] != a.image_size || shape[3] != a.image_size {
            return Err(PdenError::Shape(format!(
                "task model expects N×{}×{}×{}, got {shape:?}",
                a.in_channels, a.image_size, a.image_size
            )));
        }
        Ok(())
    }

    /// Feature extractor `F`.
    pub fn features(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(&tape.shape(x))?;
        let mut h = x;
        for i in 0..self.arch.conv_channels.len() {
            h = tape.relu(conv(tape, p, &format!("f.conv{i}"), h, 2)?);
        }
        tape.global_avg_pool(h)
    }

    /// Classifier head `C`, softmax output.
    pub fn classify(&self, tape: &Tape, p: &Bound, h: Var) -> Result<Var> {
        let a = tape.relu(dense(tape, p, "c.fc1", h)?);
        tape.softmax(dense(tape, p, "c.fc2", a)?)
    }

    /// Projection head `P`, unit-norm rows.
    pub fn project(&self, tape: &Tape, p: &Bound, h: Var) -> Result<Var> {
        tape.l2_normalize(dense(tape, p, "p.fc", h)?)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<TaskVars> {
        let features = self.features(tape, p, x)?;
        let probs = self.classify(tape, p, features)?;
        let proj = self.project(tape, p, features)?;
        Ok(TaskVars { features, probs, proj })
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<TaskOutput> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &p, xv)?;
        Ok(TaskOutput {
            features: (*tape.value(out.features)).clone(),
            probs: (*tape.value(out.probs)).clone(),
            proj: (*tape.value(out.proj)).clone(),
        })
    }

    /// Class probabilities only, skipping the projection head.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let h = self.features(&tape, &p, xv)?;
        let probs = self.classify(&tape, &p, h)?;
        Ok((*tape.value(probs)).clone())
    }

    /// Features `F(x)` only.
    pub fn predict_features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let h = self.features(&tape, &p, xv)?;
        Ok((*tape.value(h)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> TaskArch {
        TaskArch {
            in_channels: 1,
            image_size: 8,
            conv_channels: vec![4, 6],
            hidden: 5,
            classes: 3,
            proj_dim: 4,
        }
    }

    fn batch(rng: &mut Rng) -> Tensor {
        let mut x = Tensor::randn(&[5, 1, 8, 8], 1.0, rng);
        x.data_mut().iter_mut().for_each(|v| *v = (v.tanh() + 1.0) / 2.0);
        x
    }

    #[test]
    fn outputs_are_distributions_and_unit_vectors() {
        let mut rng = Rng::new(3);
        let m = TaskModel::init(small_arch(), &mut rng).unwrap();
        let out = m.predict(&batch(&mut rng)).unwrap();
        assert_eq!(out.features.shape(), &[5, 6]);
        for row in out.probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        for row in out.proj.data().chunks(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_forward_and_init() {
        let mut rng = Rng::new(3);
        let m = TaskModel::init(small_arch(), &mut rng).unwrap();
        let m2 = TaskModel::init(small_arch(), &mut Rng::new(3)).unwrap();
        assert_eq!(m, m2);
        let x = batch(&mut rng);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.proj, b.proj);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = TaskModel::init(small_arch(), &mut Rng::new(1)).unwrap();
        assert!(m.predict(&Tensor::zeros(&[2, 1, 9, 9])).is_err());
        assert!(m.predict(&Tensor::zeros(&[2, 3, 8, 8])).is_err());
    }
}
