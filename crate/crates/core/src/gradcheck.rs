//! Central finite-difference checks of every differentiable op and every
//! training loss.
//!
//! Each case builds a scalar from a list of input tensors. The analytic
//! gradient comes from [`Tape::backward`]; the numeric gradient only ever
//! evaluates forward values on fresh constant tapes. Per instance the error is
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-10)` over
//! the probed coordinates.

use std::time::Instant;

use crate::autograd::{Conv2dSpec, Tape, Var, OP_NAMES};
use crate::error::Result;
use crate::losses::{self, LossWeights, PairedBatch, UnseenInputs};
use crate::nn::{Bound, CycleGenerator, GenArch, Generator, ParamSet, TaskArch, TaskModel};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per instance; inputs with fewer scalars are probed
    /// exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Name of an op whose backward rule is deliberately corrupted.
    pub fault: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 48,
            seed: 0x6772_6164,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Loss,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub kind: CaseKind,
    pub instances: usize,
    pub worst_rel_error: f64,
    /// Probed coordinates dropped because the finite difference straddled a
    /// nondifferentiable point.
    pub skipped_coords: usize,
    pub passed: bool,
}

type Build = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(&mut Rng) -> Vec<Tensor>>;

struct Case {
    name: String,
    kind: CaseKind,
    /// Fresh random inputs for one instance.
    inputs: Inputs,
    analytic: Build,
    /// Scalar whose numeric gradient must match; defaults to `analytic`.
    numeric: Option<Build>,
    /// Indices of inputs whose gradients are compared.
    checked: Option<Vec<usize>>,
}

impl Case {
    fn new(
        name: &str,
        kind: CaseKind,
        inputs: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: Box::new(inputs),
            analytic: Box::new(f),
            numeric: None,
            checked: None,
        }
    }

    fn op(
        name: &str,
        inputs: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self::new(name, CaseKind::Op, inputs, move |t, v| weighted_sum(t, f(t, v)?))
    }

    fn loss(
        name: &str,
        inputs: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self::new(name, CaseKind::Loss, inputs, f)
    }

    fn numeric_view(mut self, f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        self.numeric = Some(Box::new(f));
        self
    }

    fn only(mut self, idx: impl IntoIterator<Item = usize>) -> Self {
        self.checked = Some(idx.into_iter().collect());
        self
    }
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so that
/// every output coordinate influences the checked gradient differently.
fn weighted_sum(tape: &Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    Ok(tape.sum(tape.mul(out, w)?))
}

fn eval_value(build: &Build, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(tape.value(build(&tape, &vars)?).item())
}

/// Second differences on either side of a smooth point agree to `O(h³)`; a
/// derivative jump `J` inside the probe window separates them by about `J·h`.
/// A gap above this (relative to `max(1, |f|)`) marks a kink.
const KINK_TOL: f64 = 1e-11;

fn check_instance(case: &Case, inputs: Vec<Tensor>, opts: &GradcheckOptions, rng: &mut Rng) -> Result<(f64, usize)> {
    let tape = match opts.fault {
        Some(op) => Tape::with_fault(op),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = (case.analytic)(&tape, &vars)?;
    tape.backward(root)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let checked: Vec<usize> = case.checked.clone().unwrap_or_else(|| (0..inputs.len()).collect());
    let mut coords: Vec<(usize, usize)> = checked
        .iter()
        .flat_map(|&i| (0..inputs[i].len()).map(move |j| (i, j)))
        .collect();
    if coords.len() > opts.max_coords {
        rng.shuffle(&mut coords);
        coords.truncate(opts.max_coords);
    }

    let numeric_build = case.numeric.as_ref().unwrap_or(&case.analytic);
    let mut probe = inputs;
    let center = eval_value(numeric_build, &probe)?;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    for (i, j) in coords {
        let orig = probe[i].data()[j];
        let mut at = |k: f64| -> Result<f64> {
            probe[i].data_mut()[j] = orig + k * opts.step;
            eval_value(numeric_build, &probe)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        probe[i].data_mut()[j] = orig;
        let numeric = (p1 - m1) / (2.0 * opts.step);
        let d2_plus = p2 - 2.0 * p1 + center;
        let d2_minus = center - 2.0 * m1 + m2;
        if (d2_plus - d2_minus).abs() > KINK_TOL * center.abs().max(1.0) {
            skipped += 1;
            continue;
        }
        let analytic = grads[i].data()[j];
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    Ok((diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-10), skipped))
}

fn run_case(case: &Case, opts: &GradcheckOptions, rng: &mut Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let mut skipped = 0;
    for _ in 0..opts.instances {
        let inputs = (case.inputs)(rng);
        match check_instance(case, inputs, opts, rng) {
            Ok((e, s)) if e.is_finite() => {
                worst = worst.max(e);
                skipped += s;
            }
            _ => {
                ok = false;
                worst = f64::INFINITY;
            }
        }
    }
    CheckResult {
        name: case.name.clone(),
        kind: case.kind,
        instances: opts.instances,
        worst_rel_error: worst,
        skipped_coords: skipped,
        passed: ok && worst < opts.tolerance,
    }
}

/// Runs every case. Deterministic given `opts.seed`.
pub fn run_suite(opts: &GradcheckOptions) -> Vec<CheckResult> {
    let mut rng = Rng::new(opts.seed);
    all_cases().iter().map(|c| run_case(c, opts, &mut rng)).collect()
}

/// Runs only the named cases.
/// Runs the cases whose name, ignoring any bracketed qualifier, is in `names`.
pub fn run_cases(names: &[&str], opts: &GradcheckOptions) -> Vec<CheckResult> {
    let mut rng = Rng::new(opts.seed);
    all_cases()
        .iter()
        .filter(|c| names.contains(&c.name.split('[').next().unwrap_or_default()))
        .map(|c| run_case(c, opts, &mut rng))
        .collect()
}

pub fn case_names() -> Vec<(String, CaseKind)> {
    all_cases().into_iter().map(|c| (c.name, c.kind)).collect()
}

/// Names of the loss cases.
pub const LOSS_NAMES: &[&str] = &[
    "cross_entropy",
    "info_nce",
    "info_nce2",
    "loss_src",
    "loss_cls",
    "loss_cyc",
    "loss_adv.generator_term",
    "loss_adv.task_term",
    "loss_adv_unbounded",
    "loss_div",
    "loss_unseen",
];

pub fn format_report(results: &[CheckResult], elapsed_secs: f64) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<5} {:<4} {:<30} worst_rel_err={:.3e} instances={} kink_skips={}\n",
            if r.passed { "PASS" } else { "FAIL" },
            match r.kind {
                CaseKind::Op => "op",
                CaseKind::Loss => "loss",
            },
            r.name,
            r.worst_rel_error,
            r.instances,
            r.skipped_coords
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!(
        "{} checks, {failed} failed, {elapsed_secs:.1}s\n",
        results.len()
    ));
    s
}

/// Times [`run_suite`].
pub fn run_suite_timed(opts: &GradcheckOptions) -> (Vec<CheckResult>, f64) {
    let start = Instant::now();
    let r = run_suite(opts);
    (r, start.elapsed().as_secs_f64())
}

// ---- inputs ----------------------------------------------------------------

fn randn(shape: &[usize]) -> impl Fn(&mut Rng) -> Tensor + '_ {
    move |rng| Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect()).unwrap()
}

/// Normal samples pushed at least 0.05 away from `kink`.
fn away_from(kink: f64, shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| {
        if (v - kink).abs() < 0.05 {
            kink + 0.05f64.copysign(v - kink)
        } else {
            v
        }
    })
}

fn images(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn tiny_task_arch() -> TaskArch {
    TaskArch {
        in_channels: 1,
        image_size: 8,
        conv_channels: vec![3, 4],
        hidden: 5,
        classes: 3,
        proj_dim: 4,
    }
}

fn tiny_gen_arch() -> GenArch {
    GenArch {
        in_channels: 1,
        image_size: 8,
        channels: vec![3, 4],
        noise_dim: 3,
        adain_init_std: 0.5,
    }
}

fn names(ps: &ParamSet) -> Vec<String> {
    ps.names().map(str::to_owned).collect()
}

fn tensors(ps: &ParamSet) -> Vec<Tensor> {
    ps.iter().map(|(_, t)| t.clone()).collect()
}

/// Perturbs biases away from zero so that every parameter has a generic
/// gradient.
fn jitter(ps: &mut ParamSet, rng: &mut Rng) {
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
}

struct ModelFixture {
    task: TaskModel,
    gen: Generator,
    cycle: CycleGenerator,
}

impl ModelFixture {
    fn new(rng: &mut Rng) -> Self {
        let mut task = TaskModel::init(tiny_task_arch(), rng).unwrap();
        let mut gen = Generator::init(tiny_gen_arch(), rng).unwrap();
        let mut cycle = CycleGenerator::init(tiny_gen_arch(), rng).unwrap();
        jitter(&mut task.params, rng);
        jitter(&mut gen.params, rng);
        jitter(&mut cycle.params, rng);
        Self { task, gen, cycle }
    }

    fn counts(&self) -> (usize, usize, usize) {
        (self.task.params.len(), self.gen.params.len(), self.cycle.params.len())
    }

    /// Inputs laid out as `[task..., gen..., cycle..., extra...]`.
    fn inputs(&self, extra: Vec<Tensor>) -> Vec<Tensor> {
        let mut v = tensors(&self.task.params);
        v.extend(tensors(&self.gen.params));
        v.extend(tensors(&self.cycle.params));
        v.extend(extra);
        v
    }
}

/// Splits the flat input vars back into model bindings.
struct Split {
    task: Bound,
    gen: Bound,
    cycle: Bound,
    extra: Vec<Var>,
}

fn split(vars: &[Var]) -> Split {
    let fx = ModelFixture::new(&mut Rng::new(0));
    let (nt, ng, nc) = fx.counts();
    Split {
        task: Bound::from_parts(names(&fx.task.params), vars[..nt].to_vec()),
        gen: Bound::from_parts(names(&fx.gen.params), vars[nt..nt + ng].to_vec()),
        cycle: Bound::from_parts(names(&fx.cycle.params), vars[nt + ng..nt + ng + nc].to_vec()),
        extra: vars[nt + ng + nc..].to_vec(),
    }
}

/// Binds task-model parameters a second time as constants with the same values.
fn frozen_copy(tape: &Tape, live: &Bound) -> Bound {
    let names = names(&TaskModel::init(tiny_task_arch(), &mut Rng::new(0)).unwrap().params);
    let vars = live
        .vars()
        .iter()
        .map(|&v| tape.constant((*tape.value(v)).clone()))
        .collect();
    Bound::from_parts(names, vars)
}

fn model_counts() -> (usize, usize, usize) {
    ModelFixture::new(&mut Rng::new(0)).counts()
}

const BATCH: usize = 3;
const NOISE_SEED: u64 = 99;

fn all_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases
}

fn op_cases() -> Vec<Case> {
    let conv_specs = [
        Conv2dSpec { stride: 2, padding: 1 },
        Conv2dSpec { stride: 1, padding: 0 },
    ];
    vec![
        Case::op(
            "add",
            |r| vec![randn(&[3, 4])(r), randn(&[3, 4])(r)],
            |t, v| t.add(v[0], v[1]),
        ),
        Case::op(
            "sub",
            |r| vec![randn(&[3, 4])(r), randn(&[3, 4])(r)],
            |t, v| t.sub(v[0], v[1]),
        ),
        Case::op(
            "mul",
            |r| vec![randn(&[3, 4])(r), randn(&[3, 4])(r)],
            |t, v| t.mul(v[0], v[1]),
        ),
        Case::op(
            "div",
            |r| {
                let b = positive(&[3, 4], r).map(|x| x * if x > 1.2 { -1.0 } else { 1.0 });
                vec![randn(&[3, 4])(r), b]
            },
            |t, v| t.div(v[0], v[1]),
        ),
        Case::op(
            "add_scalar",
            |r| vec![randn(&[3, 4])(r)],
            |t, v| Ok(t.add_scalar(v[0], 0.7)),
        ),
        Case::op(
            "mul_scalar",
            |r| vec![randn(&[3, 4])(r)],
            |t, v| Ok(t.mul_scalar(v[0], -1.3)),
        ),
        Case::op("neg", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.neg(v[0]))),
        Case::op("exp", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.exp(v[0]))),
        Case::op("log", |r| vec![positive(&[3, 4], r)], |t, v| t.log(v[0])),
        Case::op("relu", |r| vec![away_from(0.0, &[3, 4], r)], |t, v| Ok(t.relu(v[0]))),
        Case::op("tanh", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.tanh(v[0]))),
        Case::op("sigmoid", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.sigmoid(v[0]))),
        Case::op("sqrt", |r| vec![positive(&[3, 4], r)], |t, v| t.sqrt(v[0])),
        Case::op(
            "clamp_min",
            |r| vec![away_from(0.2, &[3, 4], r)],
            |t, v| Ok(t.clamp_min(v[0], 0.2)),
        ),
        Case::op(
            "clamp_max",
            |r| vec![away_from(-0.1, &[3, 4], r)],
            |t, v| Ok(t.clamp_max(v[0], -0.1)),
        ),
        Case::op("sum", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.sum(v[0]))),
        Case::op("mean", |r| vec![randn(&[3, 4])(r)], |t, v| Ok(t.mean(v[0]))),
        Case::op("sum_rows", |r| vec![randn(&[3, 2, 2])(r)], |t, v| Ok(t.sum_rows(v[0]))),
        Case::op(
            "matmul",
            |r| vec![randn(&[3, 4])(r), randn(&[4, 2])(r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        Case::op("transpose", |r| vec![randn(&[3, 4])(r)], |t, v| t.transpose(v[0])),
        Case::op(
            "add_row_bias",
            |r| vec![randn(&[3, 4])(r), randn(&[4])(r)],
            |t, v| t.add_row_bias(v[0], v[1]),
        ),
        Case::op(
            "add_channel_bias",
            |r| vec![randn(&[2, 3, 3, 3])(r), randn(&[3])(r)],
            |t, v| t.add_channel_bias(v[0], v[1]),
        ),
        Case::op("reshape", |r| vec![randn(&[3, 4])(r)], |t, v| t.reshape(v[0], &[2, 6])),
        Case::op(
            "concat_rows",
            |r| vec![randn(&[2, 3])(r), randn(&[3, 3])(r)],
            |t, v| t.concat_rows(&[v[0], v[1]]),
        ),
        Case::op(
            "slice_rows",
            |r| vec![randn(&[4, 3])(r)],
            |t, v| t.slice_rows(v[0], 1, 2),
        ),
        Case::op("gather", |r| vec![randn(&[3, 4])(r)], |t, v| t.gather(v[0], &[1, 3, 0])),
        Case::op("softmax", |r| vec![randn(&[3, 4])(r)], |t, v| t.softmax(v[0])),
        Case::op("l2_normalize", |r| vec![randn(&[3, 4])(r)], |t, v| t.l2_normalize(v[0])),
        Case::op(
            "conv2d",
            |r| {
                vec![
                    randn(&[2, 2, 5, 5])(r),
                    randn(&[3, 2, 3, 3])(r),
                    Tensor::scalar(r.below(2) as f64),
                ]
            },
            move |t, v| {
                let spec = conv_specs[t.value(v[2]).item() as usize];
                t.conv2d(v[0], v[1], spec)
            },
        )
        .only([0, 1]),
        Case::op(
            "upsample2x",
            |r| vec![randn(&[1, 2, 3, 3])(r)],
            |t, v| t.upsample2x(v[0]),
        ),
        Case::op(
            "global_avg_pool",
            |r| vec![randn(&[2, 3, 3, 4])(r)],
            |t, v| t.global_avg_pool(v[0]),
        ),
        Case::op(
            "instance_norm",
            |r| vec![randn(&[2, 3, 3, 3])(r)],
            |t, v| t.instance_norm(v[0]),
        ),
        Case::op(
            "channel_affine",
            |r| vec![randn(&[2, 3, 2, 2])(r), randn(&[2, 3])(r), randn(&[2, 3])(r)],
            |t, v| t.channel_affine(v[0], v[1], v[2]),
        ),
    ]
}

fn embeddings(rows: usize, rng: &mut Rng) -> Vec<Tensor> {
    vec![Tensor::randn(&[rows, 5], 1.0, rng)]
}

fn labels_for(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 2 + 1) % 3).collect()
}

fn loss_cases() -> Vec<Case> {
    let (nt, ng, nc) = model_counts();
    let task_idx = 0..nt;
    let gen_idx = nt..nt + ng;
    let cyc_idx = nt + ng..nt + ng + nc;
    let fixture_inputs = |extra: fn(&mut Rng) -> Vec<Tensor>| {
        move |r: &mut Rng| {
            let fx = ModelFixture::new(r);
            let e = extra(r);
            fx.inputs(e)
        }
    };
    let x_only = |r: &mut Rng| vec![images(&[BATCH, 1, 8, 8], r)];
    let task_model = || TaskModel::init(tiny_task_arch(), &mut Rng::new(0)).unwrap();
    let gen_model = || Generator::init(tiny_gen_arch(), &mut Rng::new(0)).unwrap();
    let cyc_model = || CycleGenerator::init(tiny_gen_arch(), &mut Rng::new(0)).unwrap();
    let weights = LossWeights {
        w_cyc: 0.7,
        w_adv: 0.3,
        w_div: 0.2,
    };

    let generated = move |t: &Tape, s: &Split, x: Var, seed: u64| -> Result<Var> {
        let g = gen_model();
        let noise = t.constant(g.sample_noise(BATCH, &mut Rng::new(seed)));
        g.forward(t, &s.gen, x, noise)
    };

    vec![
        Case::loss(
            "cross_entropy",
            |r| vec![randn(&[4, 3])(r)],
            |t, v| losses::cross_entropy(t, t.softmax(v[0])?, &[0, 2, 1, 2]),
        ),
        Case::loss(
            "info_nce",
            |r| embeddings(6, r),
            |t, v| losses::info_nce(t, t.l2_normalize(v[0])?),
        ),
        Case::loss(
            "info_nce2",
            |r| embeddings(6, r),
            |t, v| losses::info_nce2(t, t.l2_normalize(v[0])?),
        ),
        Case::loss(
            "loss_src",
            fixture_inputs(|r| vec![images(&[BATCH, 1, 8, 8], r), images(&[BATCH, 1, 8, 8], r)]),
            move |t, v| {
                let s = split(v);
                let batch = PairedBatch::new(
                    (*t.value(s.extra[0])).clone(),
                    (*t.value(s.extra[1])).clone(),
                    labels_for(BATCH),
                )?;
                losses::loss_src(t, &task_model(), &s.task, &batch)
            },
        )
        .only(task_idx.clone()),
        Case::loss("loss_cls", fixture_inputs(x_only), move |t, v| {
            let s = split(v);
            let x_hat = generated(t, &s, s.extra[0], NOISE_SEED)?;
            losses::loss_cls(t, &task_model(), &s.task, x_hat, &labels_for(BATCH))
        })
        .only(task_idx.clone().chain(gen_idx.clone())),
        Case::loss("loss_cyc", fixture_inputs(x_only), move |t, v| {
            let s = split(v);
            let x_hat = generated(t, &s, s.extra[0], NOISE_SEED)?;
            losses::loss_cyc(t, s.extra[0], x_hat, &cyc_model(), &s.cycle)
        })
        .only(gen_idx.clone().chain(cyc_idx.clone())),
        Case::loss("loss_adv.generator_term", fixture_inputs(x_only), move |t, v| {
            let s = split(v);
            let x_hat = generated(t, &s, s.extra[0], NOISE_SEED)?;
            let frozen = frozen_copy(t, &s.task);
            Ok(losses::loss_adv(t, &task_model(), &s.task, &frozen, s.extra[0], x_hat)?.generator_term)
        })
        .only(gen_idx.clone()),
        Case::loss("loss_adv.task_term", fixture_inputs(x_only), move |t, v| {
            let s = split(v);
            let x_hat = generated(t, &s, s.extra[0], NOISE_SEED)?;
            let frozen = frozen_copy(t, &s.task);
            Ok(losses::loss_adv(t, &task_model(), &s.task, &frozen, s.extra[0], x_hat)?.task_term)
        })
        .only(task_idx.clone()),
        Case::loss(
            "loss_adv_unbounded",
            |r| embeddings(6, r),
            |t, v| losses::loss_adv_unbounded(t, t.l2_normalize(v[0])?),
        ),
        Case::loss("loss_div", fixture_inputs(x_only), move |t, v| {
            let s = split(v);
            let a = generated(t, &s, s.extra[0], NOISE_SEED)?;
            let b = generated(t, &s, s.extra[0], NOISE_SEED + 1)?;
            losses::loss_div(t, a, b, None)
        })
        .only(gen_idx.clone()),
        // The stop-gradient split means the composite's analytic gradient is
        // the numeric gradient of a different scalar per parameter group:
        // task parameters see cls + w_adv·task_term, generator parameters see
        // everything except task_term. Checked as two cases.
        Case::loss("loss_unseen[task side]", fixture_inputs(x_only), move |t, v| {
            unseen_total(t, v, weights, UnseenView::Full)
        })
        .numeric_view(move |t, v| unseen_total(t, v, weights, UnseenView::TaskSide))
        .only(task_idx.clone()),
        Case::loss("loss_unseen[generator side]", fixture_inputs(x_only), move |t, v| {
            unseen_total(t, v, weights, UnseenView::Full)
        })
        .numeric_view(move |t, v| unseen_total(t, v, weights, UnseenView::GeneratorSide))
        .only(gen_idx.chain(cyc_idx)),
    ]
}

#[derive(Clone, Copy)]
enum UnseenView {
    Full,
    TaskSide,
    GeneratorSide,
}

fn unseen_total(t: &Tape, v: &[Var], weights: LossWeights, view: UnseenView) -> Result<Var> {
    let s = split(v);
    let task = TaskModel::init(tiny_task_arch(), &mut Rng::new(0))?;
    let gen = Generator::init(tiny_gen_arch(), &mut Rng::new(0))?;
    let cycle = CycleGenerator::init(tiny_gen_arch(), &mut Rng::new(0))?;
    let frozen = frozen_copy(t, &s.task);
    let x = (*t.value(s.extra[0])).clone();
    let y = labels_for(BATCH);
    let inputs = UnseenInputs {
        task: &task,
        task_live: &s.task,
        task_frozen: &frozen,
        gen: &gen,
        gen_params: &s.gen,
        cycle: &cycle,
        cycle_params: &s.cycle,
        x: &x,
        y: &y,
        weights,
        div_rms_ceiling: None,
    };
    let l = losses::loss_unseen(t, &inputs, &mut Rng::new(NOISE_SEED))?;
    Ok(match view {
        UnseenView::Full => l.total,
        UnseenView::TaskSide => {
            let adv = t.mul_scalar(l.adv.task_term, weights.w_adv);
            t.add(l.cls, adv)?
        }
        UnseenView::GeneratorSide => {
            let adv = t.mul_scalar(l.adv.task_term, weights.w_adv);
            t.sub(l.total, adv)?
        }
    })
}

/// Names of tape ops and losses without a case. Case names may carry a
/// bracketed qualifier.
pub fn coverage_gaps() -> Vec<String> {
    let have: Vec<String> = case_names()
        .into_iter()
        .map(|(n, _)| n.split('[').next().unwrap_or_default().to_owned())
        .collect();
    OP_NAMES
        .iter()
        .chain(LOSS_NAMES)
        .filter(|n| !have.iter().any(|h| h == *n))
        .map(|n| n.to_string())
        .collect()
}
