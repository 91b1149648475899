//! Progressive domain expansion: pretrain the task model, then repeatedly
//! train a fresh generator against it, materialize its domain into the pool
//! and retrain the task model on source/synthetic pairs.
//!
//! Every phase draws its randomness from a stream derived from the run seed
//! and the phase index alone, so the state after phase `k` of a run does not
//! depend on how many phases follow.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{DomainDataset, Provenance};
use crate::error::{PdenError, Result};
use crate::eval::accuracy;
use crate::losses::{self, LossWeights, PairedBatch, UnseenBreakdown, UnseenInputs};
use crate::nn::{CycleGenerator, GenArch, Generator, TaskArch, TaskModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{derive_seed, Rng, Tensor};

/// What the pool holds after phase `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Source plus every synthetic domain so far.
    #[default]
    Accumulate,
    /// Source plus only the newest synthetic domain.
    Replace,
}

fn default_k() -> usize {
    3
}
fn default_t_gen() -> usize {
    300
}
fn default_t_task() -> usize {
    500
}
fn default_batch() -> usize {
    32
}
fn default_task_optim() -> AdamConfig {
    AdamConfig::with_lr(1e-3)
}
fn default_gen_optim() -> AdamConfig {
    AdamConfig::with_lr(1e-3)
}
fn default_div_ceiling() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of synthetic domains.
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_t_gen")]
    pub t_gen: usize,
    #[serde(default = "default_t_task")]
    pub t_task: usize,
    /// Cross-entropy steps before the first expansion; `t_task` when absent.
    #[serde(default)]
    pub t_pretrain: Option<usize>,
    /// Pairs per batch; every step sees `2·batch` images.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_task_optim")]
    pub task_optim: AdamConfig,
    #[serde(default = "default_gen_optim")]
    pub gen_optim: AdamConfig,
    #[serde(default)]
    pub pool_mode: PoolMode,
    /// Per-pixel RMS ceiling on the diversity distance; `null` disables it.
    #[serde(default = "default_div_ceiling")]
    pub div_rms_ceiling: Option<f64>,
    #[serde(default)]
    pub task_arch: TaskArch,
    #[serde(default)]
    pub gen_arch: GenArch,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            t_gen: default_t_gen(),
            t_task: default_t_task(),
            t_pretrain: None,
            batch: default_batch(),
            weights: LossWeights::default(),
            task_optim: default_task_optim(),
            gen_optim: default_gen_optim(),
            pool_mode: PoolMode::default(),
            div_rms_ceiling: default_div_ceiling(),
            task_arch: TaskArch::default(),
            gen_arch: GenArch::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PdenError::Config(m.into()));
        if self.k < 1 {
            return bad("K must be >= 1");
        }
        if self.t_gen < 1 || self.t_task < 1 || self.t_pretrain == Some(0) {
            return bad("step counts must be >= 1");
        }
        if self.batch < 2 {
            return bad("batch must be >= 2 pairs");
        }
        if let Some(c) = self.div_rms_ceiling {
            if !(c.is_finite() && c > 0.0) {
                return bad("div_rms_ceiling must be positive");
            }
        }
        self.weights.validate()?;
        self.task_arch.validate()?;
        self.gen_arch.validate()?;
        if self.task_arch.in_channels != self.gen_arch.in_channels
            || self.task_arch.image_size != self.gen_arch.image_size
        {
            return bad("task_arch and gen_arch disagree on image layout");
        }
        Ok(())
    }

    pub fn pretrain_steps(&self) -> usize {
        self.t_pretrain.unwrap_or(self.t_task)
    }

    fn phase_rng(&self, phase: Phase, k: usize) -> Rng {
        Rng::new(derive_seed(derive_seed(self.seed, phase as u64), k as u64))
    }
}

#[derive(Clone, Copy, Debug)]
enum Phase {
    Pretrain = 1,
    GenInit = 2,
    GenTrain = 3,
    Materialize = 4,
    Retrain = 5,
}

/// One row of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub k: usize,
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub cyc: f64,
    pub adv_generator: f64,
    pub adv_task: f64,
    pub div: f64,
    pub src: f64,
}

/// Measurements taken when a phase ends.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub k: usize,
    pub source_accuracy: f64,
    /// Accuracy on the freshly materialized domain (generator phases only).
    pub synthetic_accuracy: Option<f64>,
    /// Mean per-image `‖G(x, n) − x‖₂`.
    pub shift_distance: Option<f64>,
    /// Mean per-image `‖G(x, n₁) − G(x, n₂)‖₂`.
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDomain {
    pub data: DomainDataset,
    pub generator: Generator,
    pub seed: u64,
}

/// The source domain and the synthetic domains generated from it.
#[derive(Clone, Debug)]
pub struct DomainPool {
    pub source: DomainDataset,
    pub synthetic: Vec<SyntheticDomain>,
}

impl DomainPool {
    pub fn new(source: DomainDataset) -> Self {
        Self {
            source,
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synthetic.is_empty()
    }

    pub fn add(&mut self, domain: SyntheticDomain, mode: PoolMode) -> Result<()> {
        if domain.data.len() != self.source.len() || domain.data.labels != self.source.labels {
            return Err(PdenError::InvalidArgument(
                "synthetic domain must be index-aligned with the source".into(),
            ));
        }
        if mode == PoolMode::Replace {
            self.synthetic.clear();
        }
        self.synthetic.push(domain);
        Ok(())
    }
}

/// `N` source items with their counterparts from uniformly chosen synthetic
/// domains.
pub fn pair_sampler(pool: &DomainPool, n: usize, rng: &mut Rng) -> Result<PairedBatch> {
    let (x, x_plus, y, _) = sample_pairs(pool, n, rng)?;
    PairedBatch::new(x, x_plus, y)
}

/// As [`pair_sampler`], also returning the chosen domain per pair.
pub fn sample_pairs(pool: &DomainPool, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor, Vec<usize>, Vec<usize>)> {
    if pool.is_empty() || pool.source.is_empty() {
        return Err(PdenError::InvalidArgument("pair sampling needs a nonempty pool".into()));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.below(pool.source.len())).collect();
    let domains: Vec<usize> = (0..n).map(|_| rng.below(pool.len())).collect();
    let (x, y) = pool.source.select(&idx);
    let rows: Vec<Tensor> = idx
        .iter()
        .zip(&domains)
        .map(|(&i, &d)| pool.synthetic[d].data.images.select_rows(&[i]))
        .collect();
    let x_plus = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
    Ok((x, x_plus, y, domains))
}

fn batch_indices(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(len)).collect()
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(PdenError::Diverged(format!("{what} loss is {v} at step {step}")))
    }
}

/// Cross-entropy training of `model` on `data` for `steps` steps of
/// `2·batch` images.
pub fn train_ce(
    model: &mut TaskModel,
    data: &DomainDataset,
    steps: usize,
    batch: usize,
    optim: AdamConfig,
    rng: &mut Rng,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() {
        return Err(PdenError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut adam = Adam::new(optim)?;
    for step in 0..steps {
        let idx = batch_indices(data.len(), 2 * batch, rng);
        let (x, y) = data.select(&idx);
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let xv = tape.constant(x);
        let h = model.features(&tape, &p, xv)?;
        let probs = model.classify(&tape, &p, h)?;
        let loss = losses::cross_entropy(&tape, probs, &y)?;
        let value = tape.value(loss).item();
        check_finite(value, "cross-entropy", step)?;
        tape.backward(loss)?;
        adam.step(&mut model.params, &p.grads(&tape))?;
        log(step, value);
    }
    Ok(())
}

/// Fresh task model trained with cross-entropy on the source.
pub fn pretrain(source: &DomainDataset, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<TaskModel> {
    cfg.validate()?;
    let mut rng = cfg.phase_rng(Phase::Pretrain, 0);
    let mut model = TaskModel::init(cfg.task_arch.clone(), &mut rng)?;
    train_ce(
        &mut model,
        source,
        cfg.pretrain_steps(),
        cfg.batch,
        cfg.task_optim,
        &mut rng,
        |step, v| {
            log.steps.push(StepRecord {
                phase: "pretrain".into(),
                step,
                total: v,
                cls: v,
                ..Default::default()
            })
        },
    )?;
    let acc = accuracy(&model, source)?;
    info!("pretrain: source accuracy {acc:.4}");
    log.phases.push(PhaseRecord {
        phase: "pretrain".into(),
        source_accuracy: acc,
        ..Default::default()
    });
    Ok(model)
}

/// Trains a freshly initialized generator and cycle generator for phase `k`
/// while updating `model` with the task-side gradients of the same objective.
pub fn train_generator(
    model: &mut TaskModel,
    source: &DomainDataset,
    cfg: &TrainConfig,
    k: usize,
    log: &mut MetricsLog,
) -> Result<(Generator, CycleGenerator)> {
    let mut init_rng = cfg.phase_rng(Phase::GenInit, k);
    let mut gen = Generator::init(cfg.gen_arch.clone(), &mut init_rng)?;
    let mut cycle = CycleGenerator::init(cfg.gen_arch.clone(), &mut init_rng)?;
    let mut rng = cfg.phase_rng(Phase::GenTrain, k);
    let mut task_opt = Adam::new(cfg.task_optim)?;
    let mut gen_opt = Adam::new(cfg.gen_optim)?;
    let mut cyc_opt = Adam::new(cfg.gen_optim)?;
    for step in 0..cfg.t_gen {
        let idx = batch_indices(source.len(), cfg.batch, &mut rng);
        let (x, y) = source.select(&idx);
        let tape = Tape::new();
        let live = model.params.bind(&tape, true);
        let frozen = model.params.bind(&tape, false);
        let gp = gen.params.bind(&tape, true);
        let cp = cycle.params.bind(&tape, true);
        let loss = losses::loss_unseen(
            &tape,
            &UnseenInputs {
                task: model,
                task_live: &live,
                task_frozen: &frozen,
                gen: &gen,
                gen_params: &gp,
                cycle: &cycle,
                cycle_params: &cp,
                x: &x,
                y: &y,
                weights: cfg.weights,
                div_rms_ceiling: cfg.div_rms_ceiling,
            },
            &mut rng,
        )?;
        let b: UnseenBreakdown = loss.values(&tape);
        check_finite(b.total, "unseen-domain", step)?;
        tape.backward(loss.total)?;
        task_opt.step(&mut model.params, &live.grads(&tape))?;
        gen_opt.step(&mut gen.params, &gp.grads(&tape))?;
        cyc_opt.step(&mut cycle.params, &cp.grads(&tape))?;
        if step % 50 == 0 {
            debug!("gen k={k} step={step} {b:?}");
        }
        log.steps.push(StepRecord {
            phase: "generator".into(),
            k,
            step,
            total: b.total,
            cls: b.cls,
            cyc: b.cyc,
            adv_generator: b.adv_generator,
            adv_task: b.adv_task,
            div: b.div,
            src: 0.0,
        });
    }
    Ok((gen, cycle))
}

const GEN_CHUNK: usize = 128;

/// Noise for item `i` comes from its own stream, so results do not depend on
/// chunking.
fn item_noise(g: &Generator, seed: u64, range: std::ops::Range<usize>) -> Result<Tensor> {
    let rows: Vec<Tensor> = range
        .map(|i| g.sample_noise(1, &mut Rng::new(derive_seed(seed, i as u64))))
        .collect();
    Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
}

/// `G(x, n)` for every source item with independent per-item noise.
pub fn generate_dataset(g: &Generator, source: &DomainDataset, seed: u64) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..source.len()).step_by(GEN_CHUNK) {
        let count = GEN_CHUNK.min(source.len() - start);
        let x = source.images.slice_rows(start, count);
        let noise = item_noise(g, seed, start..start + count)?;
        parts.push(g.generate(&x, &noise)?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// The synthetic domain `{(G(xᵢ, nᵢ), yᵢ)}` with labels copied from the
/// source.
pub fn materialize_domain(g: &Generator, source: &DomainDataset, k: usize, seed: u64) -> Result<DomainDataset> {
    let images = generate_dataset(g, source, seed)?;
    DomainDataset::new(
        format!("synthetic-{k}"),
        images,
        source.labels.clone(),
        source.classes,
        Provenance::Synthetic { k, seed },
    )
}

/// Mean per-image Euclidean distance between two equally shaped batches.
pub fn mean_image_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let m = a.shape()[0];
    let per = a.len() / m;
    let total: f64 = a
        .data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / m as f64)
}

/// `loss_src` training on pairs drawn from the pool.
pub fn retrain_task(
    model: &mut TaskModel,
    pool: &DomainPool,
    cfg: &TrainConfig,
    k: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    let mut rng = cfg.phase_rng(Phase::Retrain, k);
    let mut adam = Adam::new(cfg.task_optim)?;
    for step in 0..cfg.t_task {
        let batch = pair_sampler(pool, cfg.batch, &mut rng)?;
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let loss = losses::loss_src(&tape, model, &p, &batch)?;
        let value = tape.value(loss).item();
        check_finite(value, "source", step)?;
        tape.backward(loss)?;
        adam.step(&mut model.params, &p.grads(&tape))?;
        log.steps.push(StepRecord {
            phase: "retrain".into(),
            k,
            step,
            total: value,
            src: value,
            ..Default::default()
        });
    }
    Ok(())
}

/// Passed to the observer after pretraining (`k = 0`) and after every
/// expansion round.
pub struct PhaseEnd<'a> {
    pub k: usize,
    pub model: &'a TaskModel,
    pub pool: &'a DomainPool,
    pub cycle: Option<&'a CycleGenerator>,
}

pub struct RunOutput {
    pub model: TaskModel,
    /// The model right after pretraining, i.e. the cross-entropy baseline.
    pub pretrained: TaskModel,
    pub pool: DomainPool,
    pub log: MetricsLog,
}

/// Number of source items used for the post-phase distance measurements.
const PROBE_ITEMS: usize = 256;

/// Full expansion run.
pub fn run_pden(source: &DomainDataset, cfg: &TrainConfig) -> Result<RunOutput> {
    run_pden_observed(source, cfg, |_| Ok(()))
}

/// [`run_pden`] with a callback at the end of every round. An error from the
/// callback aborts the run.
pub fn run_pden_observed(
    source: &DomainDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&PhaseEnd<'_>) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (c, h, _) = source.image_dims();
    if c != cfg.task_arch.in_channels || h != cfg.task_arch.image_size {
        return Err(PdenError::Config(format!(
            "source images are {c}×{h}×{h} but the model expects {}×{s}×{s}",
            cfg.task_arch.in_channels,
            s = cfg.task_arch.image_size
        )));
    }
    if source.classes != cfg.task_arch.classes {
        return Err(PdenError::Config(format!(
            "source has {} classes but the model has {}",
            source.classes, cfg.task_arch.classes
        )));
    }
    let mut log = MetricsLog::default();
    let mut model = pretrain(source, cfg, &mut log)?;
    let pretrained = model.clone();
    let mut pool = DomainPool::new(source.clone());
    observe(&PhaseEnd {
        k: 0,
        model: &model,
        pool: &pool,
        cycle: None,
    })?;

    for k in 1..=cfg.k {
        let (gen, cycle) = train_generator(&mut model, source, cfg, k, &mut log)?;
        let seed = cfg.phase_rng(Phase::Materialize, k).next_u64();
        let data = materialize_domain(&gen, source, k, seed)?;
        let src_acc = accuracy(&model, source)?;
        let syn_acc = accuracy(&model, &data)?;
        let probe = source.take(PROBE_ITEMS.min(source.len()))?;
        let generated = data.images.slice_rows(0, probe.len());
        let shift_distance = mean_image_distance(&generated, &probe.images)?;
        let diversity = mean_image_distance(&generate_dataset(&gen, &probe, !seed)?, &generated)?;
        info!(
            "round {k}: source acc {src_acc:.4}, synthetic acc {syn_acc:.4}, distance {shift_distance:.4}, diversity {diversity:.4}"
        );
        log.phases.push(PhaseRecord {
            phase: "generator".into(),
            k,
            source_accuracy: src_acc,
            synthetic_accuracy: Some(syn_acc),
            shift_distance: Some(shift_distance),
            diversity: Some(diversity),
        });
        pool.add(
            SyntheticDomain {
                data,
                generator: gen,
                seed,
            },
            cfg.pool_mode,
        )?;
        retrain_task(&mut model, &pool, cfg, k, &mut log)?;
        let acc = accuracy(&model, source)?;
        info!("round {k}: retrained source accuracy {acc:.4}");
        log.phases.push(PhaseRecord {
            phase: "retrain".into(),
            k,
            source_accuracy: acc,
            ..Default::default()
        });
        observe(&PhaseEnd {
            k,
            model: &model,
            pool: &pool,
            cycle: Some(&cycle),
        })?;
    }
    Ok(RunOutput {
        model,
        pretrained,
        pool,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToySpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            k: 2,
            t_gen: 4,
            t_task: 4,
            t_pretrain: Some(6),
            batch: 4,
            task_arch: TaskArch {
                in_channels: 1,
                image_size: 8,
                conv_channels: vec![4, 4],
                hidden: 8,
                classes: 3,
                proj_dim: 4,
            },
            gen_arch: GenArch {
                in_channels: 1,
                image_size: 8,
                channels: vec![4, 4],
                noise_dim: 3,
                adain_init_std: 0.1,
            },
            seed: 11,
            ..Default::default()
        }
    }

    fn tiny_source() -> DomainDataset {
        make_toy_dataset(
            &ToySpec {
                classes: 3,
                count: 30,
                image_size: 8,
            },
            &mut Rng::new(3),
        )
        .unwrap()
    }

    #[test]
    fn pool_grows_by_one_per_round() {
        let out = run_pden(&tiny_source(), &tiny_cfg()).unwrap();
        assert_eq!(out.pool.len(), 2);
        for (i, d) in out.pool.synthetic.iter().enumerate() {
            assert_eq!(d.data.labels, out.pool.source.labels);
            assert_eq!(d.data.provenance, Provenance::Synthetic { k: i + 1, seed: d.seed });
        }
        let replace = TrainConfig {
            pool_mode: PoolMode::Replace,
            ..tiny_cfg()
        };
        assert_eq!(run_pden(&tiny_source(), &replace).unwrap().pool.len(), 1);
    }

    #[test]
    fn earlier_rounds_do_not_depend_on_k() {
        let src = tiny_source();
        let mut snaps = Vec::new();
        run_pden_observed(&src, &tiny_cfg(), |e| {
            snaps.push(e.model.params.clone());
            Ok(())
        })
        .unwrap();
        let short = run_pden(&src, &TrainConfig { k: 1, ..tiny_cfg() }).unwrap();
        assert_eq!(short.model.params, snaps[1]);
        assert_eq!(short.pretrained.params, snaps[0]);
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_pden(&tiny_source(), &tiny_cfg()).unwrap();
        let b = run_pden(&tiny_source(), &tiny_cfg()).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn generators_are_freshly_initialized() {
        let cfg = tiny_cfg();
        let g1 = Generator::init(cfg.gen_arch.clone(), &mut cfg.phase_rng(Phase::GenInit, 1)).unwrap();
        let g2 = Generator::init(cfg.gen_arch.clone(), &mut cfg.phase_rng(Phase::GenInit, 2)).unwrap();
        assert_ne!(g1.params, g2.params);
    }

    #[test]
    fn materialize_is_deterministic_and_aligned() {
        let src = tiny_source();
        let g = Generator::init(tiny_cfg().gen_arch, &mut Rng::new(1)).unwrap();
        let a = materialize_domain(&g, &src, 1, 7).unwrap();
        assert_eq!(a.len(), src.len());
        assert_eq!(a.label_histogram(), src.label_histogram());
        assert_eq!(a, materialize_domain(&g, &src, 1, 7).unwrap());
        assert_ne!(a.images, materialize_domain(&g, &src, 1, 8).unwrap().images);
    }

    #[test]
    fn pair_sampler_picks_domains_uniformly() {
        let src = tiny_source();
        let g = Generator::init(tiny_cfg().gen_arch, &mut Rng::new(1)).unwrap();
        let mut pool = DomainPool::new(src.clone());
        for k in 1..=4 {
            let data = materialize_domain(&g, &src, k, k as u64).unwrap();
            pool.add(
                SyntheticDomain {
                    data,
                    generator: g.clone(),
                    seed: k as u64,
                },
                PoolMode::Accumulate,
            )
            .unwrap();
        }
        let mut counts = [0usize; 4];
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let (x, x_plus, y, d) = sample_pairs(&pool, 100, &mut rng).unwrap();
            assert_eq!(x.shape(), x_plus.shape());
            assert_eq!(y.len(), 100);
            for &j in &d {
                counts[j] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn positives_share_labels_with_anchors() {
        let src = tiny_source();
        let g = Generator::init(tiny_cfg().gen_arch, &mut Rng::new(1)).unwrap();
        let data = materialize_domain(&g, &src, 1, 3).unwrap();
        let mut pool = DomainPool::new(src.clone());
        pool.add(
            SyntheticDomain {
                data: data.clone(),
                generator: g,
                seed: 3,
            },
            PoolMode::Accumulate,
        )
        .unwrap();
        let mut rng = Rng::new(2);
        let (x, x_plus, y, _) = sample_pairs(&pool, 6, &mut rng).unwrap();
        for (i, &yi) in y.iter().enumerate() {
            let row = x.select_rows(&[i]);
            let j = (0..src.len()).find(|&j| src.images.select_rows(&[j]) == row).unwrap();
            assert_eq!(src.labels[j], yi);
            assert_eq!(data.images.select_rows(&[j]), x_plus.select_rows(&[i]));
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(pair_sampler(&DomainPool::new(tiny_source()), 4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { k: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { batch: 1, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { t_gen: 0, ..tiny_cfg() }.validate().is_err());
        let mut bad = tiny_cfg();
        bad.gen_arch.image_size = 16;
        assert!(bad.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
