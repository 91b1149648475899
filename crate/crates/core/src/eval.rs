//! Accuracy measurement, arm comparisons, sweeps, feature export and few-shot
//! adaptation.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{apply_shift, DomainDataset, Provenance, ShiftSpec};
use crate::error::{PdenError, Result};
use crate::losses::{self, LossWeights};
use crate::nn::TaskModel;
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{run_pden_observed, RunOutput, TrainConfig};
use crate::tensor::{Rng, Tensor};

const EVAL_CHUNK: usize = 256;

/// Correct-prediction count of `model` on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub domain: String,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Argmax accuracy over the whole dataset.
pub fn evaluate(model: &TaskModel, ds: &DomainDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(PdenError::InvalidArgument(format!("dataset {} is empty", ds.name)));
    }
    let mut correct = 0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let count = EVAL_CHUNK.min(ds.len() - start);
        let probs = model.predict_probs(&ds.images.slice_rows(start, count))?;
        correct += probs
            .argmax_rows()
            .iter()
            .zip(&ds.labels[start..start + count])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(Evaluation {
        domain: ds.name.clone(),
        correct,
        n: ds.len(),
        accuracy: correct as f64 / ds.len() as f64,
    })
}

pub fn accuracy(model: &TaskModel, ds: &DomainDataset) -> Result<f64> {
    Ok(evaluate(model, ds)?.accuracy)
}

/// The unshifted test split followed by one shifted copy per spec.
pub fn benchmark_domains(test: &DomainDataset, shifts: &[ShiftSpec]) -> Result<Vec<DomainDataset>> {
    let mut out = vec![test.clone()];
    for s in shifts {
        out.push(apply_shift(test, s)?);
    }
    Ok(out)
}

pub fn evaluate_all(model: &TaskModel, domains: &[DomainDataset]) -> Result<Vec<(Evaluation, Provenance)>> {
    domains
        .iter()
        .map(|d| Ok((evaluate(model, d)?, d.provenance.clone())))
        .collect()
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub arm: String,
    pub domain: String,
    /// `none` for unshifted domains.
    pub shift_kind: String,
    /// 0 for unshifted domains.
    pub severity: u8,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub w_adv: f64,
    pub w_cyc: f64,
    pub w_div: f64,
}

impl MetricsRecord {
    pub fn is_shifted(&self) -> bool {
        self.severity > 0
    }
}

/// Columns shared by every record of one arm.
#[derive(Clone, Debug)]
pub struct ArmTag {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub k: usize,
    pub weights: LossWeights,
}

impl ArmTag {
    pub fn records(&self, evals: &[(Evaluation, Provenance)]) -> Vec<MetricsRecord> {
        evals
            .iter()
            .map(|(e, prov)| {
                let (shift_kind, severity) = match prov {
                    Provenance::Shifted { shift } => (shift.kind.name().to_owned(), shift.severity),
                    _ => ("none".to_owned(), 0),
                };
                MetricsRecord {
                    run_id: self.run_id.clone(),
                    arm: self.arm.clone(),
                    domain: e.domain.clone(),
                    shift_kind,
                    severity,
                    accuracy: e.accuracy,
                    n: e.n,
                    seed: self.seed,
                    k: self.k,
                    w_adv: self.weights.w_adv,
                    w_cyc: self.weights.w_cyc,
                    w_div: self.weights.w_div,
                }
            })
            .collect()
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| PdenError::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| PdenError::Format(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records)?)?;
    Ok(())
}

/// Mean accuracy over shifted domains.
pub fn mean_shifted_accuracy(records: &[MetricsRecord]) -> Option<f64> {
    let shifted: Vec<f64> = records.iter().filter(|r| r.is_shifted()).map(|r| r.accuracy).collect();
    (!shifted.is_empty()).then(|| shifted.iter().sum::<f64>() / shifted.len() as f64)
}

/// Two leading principal axes of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Pca2 {
    /// Fits on the rows of `features[N×D]`. Each axis is signed so that its
    /// largest-magnitude entry is positive.
    pub fn fit(features: &Tensor) -> Result<Self> {
        let (n, d) = (features.shape()[0], features.len() / features.shape()[0].max(1));
        if features.ndim() != 2 || n < 2 || d < 2 {
            return Err(PdenError::InvalidArgument(
                "PCA needs at least 2 rows and 2 columns".into(),
            ));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |i: usize| {
            let v: Vec<f64> = eig.eigenvectors.column(order[i]).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0, |m: f64, a| if a.abs() > m.abs() { a } else { m });
            v.into_iter()
                .map(|a| if pivot < 0.0 { -a } else { a })
                .collect::<Vec<f64>>()
        };
        Ok(Self {
            mean: mean.iter().copied().collect(),
            axes: [axis(0), axis(1)],
            variances: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        })
    }

    pub fn project(&self, features: &Tensor) -> Vec<[f64; 2]> {
        let d = self.mean.len();
        features
            .data()
            .chunks(d)
            .map(|row| {
                let c = |axis: &[f64]| {
                    row.iter()
                        .zip(&self.mean)
                        .zip(axis)
                        .map(|((v, m), a)| (v - m) * a)
                        .sum()
                };
                [c(&self.axes[0]), c(&self.axes[1])]
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct FeatureRow<'a> {
    x1: f64,
    x2: f64,
    label: usize,
    domain: &'a str,
}

fn features_of(model: &TaskModel, ds: &DomainDataset) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let count = EVAL_CHUNK.min(ds.len() - start);
        parts.push(model.predict_features(&ds.images.slice_rows(start, count))?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Writes `x1,x2,label,domain` rows for `source` and every target, projected
/// onto principal axes fitted on the source features.
pub fn export_features(
    model: &TaskModel,
    source: &DomainDataset,
    targets: &[DomainDataset],
    path: &Path,
) -> Result<Pca2> {
    if source.is_empty() {
        return Err(PdenError::InvalidArgument(
            "feature export needs a nonempty source".into(),
        ));
    }
    let pca = Pca2::fit(&features_of(model, source)?)?;
    let mut w = csv::Writer::from_path(path)?;
    for ds in std::iter::once(source).chain(targets) {
        let projected = pca.project(&features_of(model, ds)?);
        for (p, &label) in projected.iter().zip(&ds.labels) {
            w.serialize(FeatureRow {
                x1: p[0],
                x2: p[1],
                label,
                domain: &ds.name,
            })?;
        }
    }
    w.flush()?;
    Ok(pca)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub steps: usize,
    pub lr: f64,
    /// Images per step, drawn with replacement from the shots.
    #[serde(default = "default_fewshot_batch")]
    pub batch: usize,
    /// Update only the classifier and projection heads.
    #[serde(default)]
    pub heads_only: bool,
}

fn default_fewshot_batch() -> usize {
    32
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1e-3,
            batch: default_fewshot_batch(),
            heads_only: false,
        }
    }
}

/// Cross-entropy fine-tuning on a handful of labeled target images. Returns
/// an adapted copy.
pub fn few_shot_adapt(
    model: &TaskModel,
    shots: &DomainDataset,
    cfg: &FewShotConfig,
    rng: &mut Rng,
) -> Result<TaskModel> {
    if shots.is_empty() {
        return Err(PdenError::InvalidArgument(
            "few-shot adaptation needs at least one shot".into(),
        ));
    }
    let missing: Vec<usize> = shots
        .label_histogram()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        warn!("few-shot set has no examples of classes {missing:?}");
    }
    let mut adapted = model.clone();
    let frozen: Vec<bool> = adapted
        .params
        .names()
        .map(|n| cfg.heads_only && n.starts_with("f."))
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(shots.len())).collect();
        let (x, y) = shots.select(&idx);
        let tape = Tape::new();
        let p = adapted.params.bind(&tape, true);
        let xv = tape.constant(x);
        let h = adapted.features(&tape, &p, xv)?;
        let probs = adapted.classify(&tape, &p, h)?;
        let loss = losses::cross_entropy(&tape, probs, &y)?;
        tape.backward(loss)?;
        let mut grads = p.grads(&tape);
        for (g, &f) in grads.iter_mut().zip(&frozen) {
            if f {
                *g = Tensor::zeros(g.shape());
            }
        }
        adam.step(&mut adapted.params, &grads)?;
    }
    Ok(adapted)
}

/// Both arms of one seeded run evaluated on the same domains.
pub struct Comparison {
    pub erm: Vec<(Evaluation, Provenance)>,
    pub pden: Vec<(Evaluation, Provenance)>,
    pub records: Vec<MetricsRecord>,
    pub run: RunOutput,
}

impl Comparison {
    /// Per-domain `(name, erm, pden, pden − erm)`.
    pub fn table(&self) -> Vec<(String, f64, f64, f64)> {
        self.erm
            .iter()
            .zip(&self.pden)
            .map(|((e, _), (p, _))| (e.domain.clone(), e.accuracy, p.accuracy, p.accuracy - e.accuracy))
            .collect()
    }
}

/// Trains PDEN and takes its pretrained task model as the cross-entropy
/// baseline, so both arms share seed, data and initialization.
pub fn compare_arms(
    train: &DomainDataset,
    domains: &[DomainDataset],
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<Comparison> {
    let run = run_pden_observed(train, cfg, |_| Ok(()))?;
    let erm = evaluate_all(&run.pretrained, domains)?;
    let pden = evaluate_all(&run.model, domains)?;
    let tag = |arm: &str, k| ArmTag {
        run_id: run_id.into(),
        arm: arm.into(),
        seed: cfg.seed,
        k,
        weights: cfg.weights,
    };
    let mut records = tag("erm", 0).records(&erm);
    records.extend(tag("pden", cfg.k).records(&pden));
    Ok(Comparison {
        erm,
        pden,
        records,
        run,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "w_adv")]
    WAdv,
    #[serde(rename = "w_cyc")]
    WCyc,
    #[serde(rename = "w_div")]
    WDiv,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::K => "K",
            Self::WAdv => "w_adv",
            Self::WCyc => "w_cyc",
            Self::WDiv => "w_div",
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        match self {
            Self::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(PdenError::Config(format!("K must be a positive integer, got {value}")));
                }
                c.k = value as usize;
            }
            Self::WAdv => c.weights.w_adv = value,
            Self::WCyc => c.weights.w_cyc = value,
            Self::WDiv => c.weights.w_div = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepParam {
    type Err = PdenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(Self::K),
            "w_adv" => Ok(Self::WAdv),
            "w_cyc" => Ok(Self::WCyc),
            "w_div" => Ok(Self::WDiv),
            _ => Err(PdenError::Config(format!(
                "unknown sweep parameter {s:?}; expected K, w_adv, w_cyc or w_div"
            ))),
        }
    }
}

/// Removes repeated values, keeping first occurrences; returns the removed
/// duplicates too.
pub fn dedup_values(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut dups = Vec::new();
    for &v in values {
        if kept.contains(&v) {
            dups.push(v);
        } else {
            kept.push(v);
        }
    }
    (kept, dups)
}

/// Runs one PDEN arm per value under the config's seed and data. A `K` sweep
/// trains once up to the largest value and evaluates the intermediate models,
/// which are identical to shorter runs. The baseline is recorded once as
/// arm `erm`.
pub fn sweep(
    train: &DomainDataset,
    domains: &[DomainDataset],
    cfg: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    run_id: &str,
) -> Result<Vec<MetricsRecord>> {
    if values.is_empty() {
        return Err(PdenError::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<TrainConfig> = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<_>>()?;
    let tag = |c: &TrainConfig, arm: &str, k: usize| ArmTag {
        run_id: run_id.into(),
        arm: arm.into(),
        seed: c.seed,
        k,
        weights: c.weights,
    };
    let mut records = Vec::new();
    if param == SweepParam::K {
        let wanted: Vec<usize> = configs.iter().map(|c| c.k).collect();
        let max_k = *wanted.iter().max().unwrap_or(&1);
        let mut by_k: BTreeMap<usize, Vec<MetricsRecord>> = BTreeMap::new();
        let run_cfg = TrainConfig {
            k: max_k,
            ..cfg.clone()
        };
        run_pden_observed(train, &run_cfg, |e| {
            if e.k == 0 {
                records.extend(tag(cfg, "erm", 0).records(&evaluate_all(e.model, domains)?));
            } else if wanted.contains(&e.k) {
                by_k.insert(e.k, tag(cfg, "pden", e.k).records(&evaluate_all(e.model, domains)?));
            }
            Ok(())
        })?;
        for k in wanted {
            records.extend(by_k[&k].iter().cloned());
        }
    } else {
        for (i, c) in configs.iter().enumerate() {
            let run = run_pden_observed(train, c, |_| Ok(()))?;
            if i == 0 {
                records.extend(tag(c, "erm", 0).records(&evaluate_all(&run.pretrained, domains)?));
            }
            records.extend(tag(c, "pden", c.k).records(&evaluate_all(&run.model, domains)?));
        }
    }
    Ok(records)
}
