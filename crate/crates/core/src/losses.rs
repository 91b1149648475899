//! Training objectives.
//!
//! Embedding batches follow one index convention throughout: rows `0..N` are
//! the source images and rows `N..2N` their positives, so row `i` pairs with
//! `(i + N) mod 2N`.
//!
//! Reductions: every loss is a mean over samples or anchors, except
//! [`info_nce2`], which is a sum over all `2N` anchors.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{PdenError, Result};
use crate::nn::{Bound, CycleGenerator, Generator, TaskModel};
use crate::tensor::{Rng, Tensor};

/// Probability floor before the log in cross-entropy.
pub const CE_PROB_FLOOR: f64 = 1e-12;
/// `1 - NCE2_FRACTION_CEIL` keeps `log(1 - fraction)` finite.
pub const NCE2_FRACTION_CEIL: f64 = 1.0 - 1e-12;
/// Allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Source images, their positives and the shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub x: Tensor,
    pub x_plus: Tensor,
    pub y: Vec<usize>,
}

impl PairedBatch {
    pub fn new(x: Tensor, x_plus: Tensor, y: Vec<usize>) -> Result<Self> {
        x.expect_same_shape(&x_plus)?;
        if x.shape()[0] != y.len() {
            return Err(PdenError::Shape(format!(
                "{} images but {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if y.len() < 2 {
            return Err(PdenError::InvalidArgument("a paired batch needs N >= 2".into()));
        }
        Ok(Self { x, x_plus, y })
    }

    pub fn pairs(&self) -> usize {
        self.y.len()
    }

    /// `[x; x_plus]` along the batch axis.
    pub fn combined_images(&self) -> Tensor {
        Tensor::concat_rows(&[&self.x, &self.x_plus]).expect("validated shapes")
    }

    pub fn combined_labels(&self) -> Vec<usize> {
        self.y.iter().chain(&self.y).copied().collect()
    }
}

/// Weights of the generator objective; the classification term is fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cyc: f64,
    pub w_adv: f64,
    pub w_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cyc: 20.0,
            w_adv: 0.1,
            w_div: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_cyc: 0.0,
            w_adv: 0.0,
            w_div: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_cyc", self.w_cyc), ("w_adv", self.w_adv), ("w_div", self.w_div)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(PdenError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Mean of `-log max(p[i, y[i]], 1e-12)`.
pub fn cross_entropy(tape: &Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(PdenError::Shape(format!(
            "cross_entropy: probs {shape:?} with {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(PdenError::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let picked = tape.clamp_min(tape.gather(probs, labels)?, CE_PROB_FLOOR);
    Ok(tape.neg(tape.mean(tape.log(picked)?)))
}

fn check_embeddings(tape: &Tape, z: Var) -> Result<usize> {
    let v = tape.value(z);
    if v.ndim() != 2 || v.shape()[0] < 2 || !v.shape()[0].is_multiple_of(2) {
        return Err(PdenError::Shape(format!(
            "contrastive loss needs an even number (>= 2) of embedding rows, got {:?}",
            v.shape()
        )));
    }
    let d = v.shape()[1];
    for (i, row) in v.data().chunks(d).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(PdenError::Domain(format!("embedding row {i} has norm {norm}")));
        }
    }
    Ok(v.shape()[0])
}

/// `log( exp(z_i·z_i⁺) / Σ_{j≠i} exp(z_i·z_j) )` for every anchor, shape `[2N]`.
fn log_fractions(tape: &Tape, z: Var) -> Result<Var> {
    let two_n = check_embeddings(tape, z)?;
    let half = two_n / 2;
    let sim = tape.matmul(z, tape.transpose(z)?)?;
    let mut mask = Tensor::ones(&[two_n, two_n]);
    for i in 0..two_n {
        mask.data_mut()[i * two_n + i] = 0.0;
    }
    let off_diag = tape.mul(tape.exp(sim), tape.constant(mask))?;
    let log_denom = tape.log(tape.sum_rows(off_diag))?;
    let partner: Vec<usize> = (0..two_n).map(|i| (i + half) % two_n).collect();
    let positive = tape.gather(sim, &partner)?;
    tape.sub(positive, log_denom)
}

/// Contrastive loss over `2N` unit embeddings with no temperature, averaged
/// over all anchors. The positive stays in the denominator.
pub fn info_nce(tape: &Tape, z: Var) -> Result<Var> {
    let lf = log_fractions(tape, z)?;
    Ok(tape.neg(tape.mean(lf)))
}

/// `Σ_i log(1 − fraction_i)` over all `2N` anchors, with the fraction capped
/// just below 1. Always `<= 0`.
pub fn info_nce2(tape: &Tape, z: Var) -> Result<Var> {
    let lf = log_fractions(tape, z)?;
    let frac = tape.clamp_max(tape.exp(lf), NCE2_FRACTION_CEIL);
    let one_minus = tape.add_scalar(tape.neg(frac), 1.0);
    Ok(tape.sum(tape.log(one_minus)?))
}

/// Classification over all `2N` images plus the contrastive term over their
/// projections.
pub fn loss_src(tape: &Tape, model: &TaskModel, params: &Bound, batch: &PairedBatch) -> Result<Var> {
    let x = tape.constant(batch.combined_images());
    let out = model.forward(tape, params, x)?;
    let ce = cross_entropy(tape, out.probs, &batch.combined_labels())?;
    let nce = info_nce(tape, out.proj)?;
    tape.add(ce, nce)
}

/// Cross-entropy of the task model on generated images.
pub fn loss_cls(tape: &Tape, model: &TaskModel, params: &Bound, x_hat: Var, y: &[usize]) -> Result<Var> {
    let h = model.features(tape, params, x_hat)?;
    let probs = model.classify(tape, params, h)?;
    cross_entropy(tape, probs, y)
}

/// Batch mean of `‖x − G_cyc(x̂)‖₂` per flattened sample.
pub fn loss_cyc(tape: &Tape, x: Var, x_hat: Var, cycle: &CycleGenerator, params: &Bound) -> Result<Var> {
    let recon = cycle.forward(tape, params, x_hat)?;
    let diff = tape.sub(x, recon)?;
    Ok(tape.mean(per_sample_norm(tape, diff)?))
}

fn per_sample_norm(tape: &Tape, diff: Var) -> Result<Var> {
    let sq = tape.mul(diff, diff)?;
    tape.sqrt(tape.sum_rows(sq))
}

/// Both halves of the adversarial objective.
#[derive(Clone, Copy, Debug)]
pub struct AdvTerms {
    /// `−info_nce2`; reaches only generator parameters.
    pub generator_term: Var,
    /// `info_nce`; reaches only task-model parameters.
    pub task_term: Var,
}

/// Adversarial contrastive terms on `(x, x̂)` pairs.
///
/// `live` must be the task model's trainable binding and `frozen` a constant
/// binding of the same parameters. The generator term runs through `frozen`
/// so no task parameter sees its gradient; the task term sees `x̂` through a
/// stop-gradient so no generator parameter sees its gradient.
pub fn loss_adv(tape: &Tape, model: &TaskModel, live: &Bound, frozen: &Bound, x: Var, x_hat: Var) -> Result<AdvTerms> {
    let embed = |params: &Bound, a: Var, b: Var| -> Result<Var> {
        let both = tape.concat_rows(&[a, b])?;
        let h = model.features(tape, params, both)?;
        model.project(tape, params, h)
    };
    let z_gen = embed(frozen, x, x_hat)?;
    let generator_term = tape.neg(info_nce2(tape, z_gen)?);
    let z_task = embed(live, x, tape.stop_gradient(x_hat))?;
    let task_term = info_nce(tape, z_task)?;
    Ok(AdvTerms {
        generator_term,
        task_term,
    })
}

/// The unstable form of the adversarial objective, with `−info_nce` as the
/// generator term. Kept for comparison only; training uses [`loss_adv`].
pub fn loss_adv_unbounded(tape: &Tape, z: Var) -> Result<Var> {
    Ok(tape.neg(info_nce(tape, z)?))
}

/// `−mean min(‖G(x,n₁) − G(x,n₂)‖₂, τ·√D)` where `D` is the per-sample pixel
/// count and `τ` the per-pixel RMS ceiling (`None` disables the cap).
pub fn loss_div(tape: &Tape, x_hat1: Var, x_hat2: Var, rms_ceiling: Option<f64>) -> Result<Var> {
    let diff = tape.sub(x_hat1, x_hat2)?;
    let shape = tape.shape(diff);
    let d: usize = shape[1..].iter().product();
    let mut norms = per_sample_norm(tape, diff)?;
    if let Some(tau) = rms_ceiling {
        norms = tape.clamp_max(norms, tau * (d as f64).sqrt());
    }
    Ok(tape.neg(tape.mean(norms)))
}

/// Everything needed to evaluate the generator objective on one tape.
pub struct UnseenInputs<'a> {
    pub task: &'a TaskModel,
    pub task_live: &'a Bound,
    pub task_frozen: &'a Bound,
    pub gen: &'a Generator,
    pub gen_params: &'a Bound,
    pub cycle: &'a CycleGenerator,
    pub cycle_params: &'a Bound,
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub weights: LossWeights,
    pub div_rms_ceiling: Option<f64>,
}

/// Composite objective with its terms kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct UnseenLoss {
    pub total: Var,
    pub cls: Var,
    pub cyc: Var,
    pub adv: AdvTerms,
    pub div: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnseenBreakdown {
    pub total: f64,
    pub cls: f64,
    pub cyc: f64,
    pub adv_generator: f64,
    pub adv_task: f64,
    pub div: f64,
}

impl UnseenLoss {
    pub fn values(&self, tape: &Tape) -> UnseenBreakdown {
        let v = |x: Var| tape.value(x).item();
        UnseenBreakdown {
            total: v(self.total),
            cls: v(self.cls),
            cyc: v(self.cyc),
            adv_generator: v(self.adv.generator_term),
            adv_task: v(self.adv.task_term),
            div: v(self.div),
        }
    }
}

/// `L_cls + w_cyc·L_cyc + w_adv·(generator_term + task_term) + w_div·L_div`.
///
/// One noise draw produces `x̂` for the classification, cycle and adversarial
/// terms; the diversity term pairs it with a second, independent draw.
pub fn loss_unseen(tape: &Tape, inp: &UnseenInputs<'_>, rng: &mut Rng) -> Result<UnseenLoss> {
    inp.weights.validate()?;
    let n = inp.y.len();
    let x = tape.constant(inp.x.clone());
    let n1 = tape.constant(inp.gen.sample_noise(n, rng));
    let n2 = tape.constant(inp.gen.sample_noise(n, rng));
    let x_hat = inp.gen.forward(tape, inp.gen_params, x, n1)?;

    let cls = loss_cls(tape, inp.task, inp.task_live, x_hat, inp.y)?;
    let cyc = loss_cyc(tape, x, x_hat, inp.cycle, inp.cycle_params)?;
    let adv = loss_adv(tape, inp.task, inp.task_live, inp.task_frozen, x, x_hat)?;
    let div = if inp.weights.w_div > 0.0 {
        let x_hat2 = inp.gen.forward(tape, inp.gen_params, x, n2)?;
        loss_div(tape, x_hat, x_hat2, inp.div_rms_ceiling)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let w = inp.weights;
    let adv_sum = tape.add(adv.generator_term, adv.task_term)?;
    let mut total = cls;
    for (term, weight) in [(cyc, w.w_cyc), (adv_sum, w.w_adv), (div, w.w_div)] {
        total = tape.add(total, tape.mul_scalar(term, weight))?;
    }
    Ok(UnseenLoss {
        total,
        cls,
        cyc,
        adv,
        div,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(tape: &Tape, rows: &[&[f64]]) -> Var {
        tape.constant(Tensor::from_rows(rows))
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::new();
        let onehot = tape.constant(Tensor::from_rows(&[&[0., 1., 0.]]));
        assert_eq!(tape.value(cross_entropy(&tape, onehot, &[1]).unwrap()).item(), 0.0);
        let uniform = tape.constant(Tensor::full(&[3, 10], 0.1));
        let ce = tape.value(cross_entropy(&tape, uniform, &[0, 4, 9]).unwrap()).item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let quarter = tape.constant(Tensor::from_rows(&[&[0.25, 0.75]]));
        let ce = tape.value(cross_entropy(&tape, quarter, &[0]).unwrap()).item();
        assert!((ce - 1.386294).abs() < 1e-6);
        assert!(cross_entropy(&tape, quarter, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[&[0., 1.]]));
        let ce = tape.value(cross_entropy(&tape, p, &[0]).unwrap()).item();
        assert!((ce - (-CE_PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let tape = Tape::new();
        let z = emb(&tape, &[&[1., 0.], &[0., 1.]]);
        assert_eq!(tape.value(info_nce(&tape, z).unwrap()).item(), 0.0);
    }

    #[test]
    fn info_nce_identical_and_orthogonal() {
        let tape = Tape::new();
        let same = emb(&tape, &[&[1., 0.], &[1., 0.], &[1., 0.], &[1., 0.]]);
        let v = tape.value(info_nce(&tape, same).unwrap()).item();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        let v2 = tape.value(info_nce2(&tape, same).unwrap()).item();
        assert!((v2 - 4.0 * (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v2 + 1.621860).abs() < 1e-6);

        // pairs (0,2) and (1,3) coincide; the two pairs are orthogonal
        let orth = emb(&tape, &[&[1., 0.], &[0., 1.], &[1., 0.], &[0., 1.]]);
        let v = tape.value(info_nce(&tape, orth).unwrap()).item();
        let e = std::f64::consts::E;
        assert!((v - ((e + 2.0).ln() - 1.0)).abs() < 1e-12);
        assert!((v - 0.552).abs() < 1e-3);
    }

    #[test]
    fn contrastive_losses_reject_bad_input() {
        let tape = Tape::new();
        let unnormalized = emb(&tape, &[&[2., 0.], &[1., 0.]]);
        assert!(info_nce(&tape, unnormalized).is_err());
        let odd = emb(&tape, &[&[1., 0.], &[1., 0.], &[1., 0.]]);
        assert!(info_nce(&tape, odd).is_err());
    }

    #[test]
    fn info_nce2_near_zero_when_positive_is_far() {
        let tape = Tape::new();
        // positives antipodal, negatives identical to the anchor
        let z = emb(&tape, &[&[1., 0.], &[1., 0.], &[-1., 0.], &[-1., 0.]]);
        let v = tape.value(info_nce2(&tape, z).unwrap()).item();
        let e = std::f64::consts::E;
        let frac = (-1.0f64).exp() / (2.0 * (-1.0f64).exp() + e);
        assert!((v - 4.0 * (1.0 - frac).ln()).abs() < 1e-12);
        assert!(v < 0.0 && v > -0.5);
    }

    #[test]
    fn loss_div_zero_for_equal_outputs_and_bounded_by_ceiling() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 1, 2, 2], 0.3));
        assert_eq!(tape.value(loss_div(&tape, a, a, Some(1.0)).unwrap()).item(), 0.0);
        let b = tape.constant(Tensor::full(&[2, 1, 2, 2], 0.9));
        let capped = tape.value(loss_div(&tape, a, b, Some(0.1)).unwrap()).item();
        assert!((capped + 0.1 * 2.0).abs() < 1e-12);
        let free = tape.value(loss_div(&tape, a, b, None).unwrap()).item();
        assert!((free + 0.6 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            w_cyc: -1.0,
            ..LossWeights::zero()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            w_adv: f64::NAN,
            ..LossWeights::zero()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn paired_batch_validation() {
        let x = Tensor::zeros(&[2, 1, 4, 4]);
        assert!(PairedBatch::new(x.clone(), x.clone(), vec![0, 1]).is_ok());
        assert!(PairedBatch::new(x.clone(), x.clone(), vec![0]).is_err());
        assert!(PairedBatch::new(x.clone(), Tensor::zeros(&[2, 1, 4, 5]), vec![0, 1]).is_err());
        let one = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(PairedBatch::new(one.clone(), one, vec![0]).is_err());
    }
}
