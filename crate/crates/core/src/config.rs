//! Declarative run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{default_benchmark, load_idx, make_toy_dataset, DomainDataset, ShiftSpec, ToySpec};
use crate::error::{PdenError, Result};
use crate::eval::{FewShotConfig, SweepParam};
use crate::pipeline::TrainConfig;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Erm,
    Pden,
    Sweep,
    Fewshot,
    Gradcheck,
}

impl std::str::FromStr for Arm {
    type Err = PdenError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| {
            PdenError::Config(format!(
                "unknown arm {s:?}; expected erm, pden, sweep, fewshot or gradcheck"
            ))
        })
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Toy {
        classes: usize,
        count: usize,
        image_size: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Optional conversion applied after loading, e.g. padding 28×28 digits to
/// 32×32 with three channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub channels: usize,
    pub image_size: usize,
}

impl DataSpec {
    /// Relative IDX paths resolve against `base`.
    pub fn load(&self, base: &Path, layout: Option<Layout>) -> Result<DomainDataset> {
        let ds = match self {
            DataSpec::Toy {
                classes,
                count,
                image_size,
                seed,
            } => make_toy_dataset(
                &ToySpec {
                    classes: *classes,
                    count: *count,
                    image_size: *image_size,
                },
                &mut Rng::new(*seed),
            )?,
            DataSpec::Idx { images, labels, limit } => load_idx(&base.join(images), &base.join(labels), *limit)?,
        };
        match layout {
            Some(l) => ds.to_layout(l.channels, l.image_size),
            None => Ok(ds),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    /// The held-out shift to adapt to; shots come from the shifted train split.
    pub shift: ShiftSpec,
    /// Shots per class for each adapted model.
    pub shots: Vec<usize>,
    #[serde(default)]
    pub finetune: FewShotConfig,
}

fn default_benchmark_shifts() -> Vec<ShiftSpec> {
    default_benchmark(0)
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub arm: Arm,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_data: DataSpec,
    pub test_data: DataSpec,
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default = "default_benchmark_shifts")]
    pub benchmark: Vec<ShiftSpec>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub fewshot: Option<FewShotSpec>,
    /// Instances per gradient-check case.
    #[serde(default)]
    pub gradcheck_instances: Option<usize>,
    #[serde(default = "default_true")]
    pub export_features: bool,
    /// Images per sample grid.
    #[serde(default = "default_grid_images")]
    pub grid_images: usize,
}

fn default_grid_images() -> usize {
    64
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PdenError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PdenError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical JSON with every default filled in; parses back to `self`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::to_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for s in &self.benchmark {
            s.validate().map_err(|e| PdenError::Config(e.to_string()))?;
        }
        if self.grid_images == 0 {
            return Err(PdenError::Config("grid_images must be >= 1".into()));
        }
        match self.arm {
            Arm::Sweep if self.sweep.is_none() => Err(PdenError::Config("arm sweep needs a sweep section".into())),
            Arm::Fewshot => {
                let f = self
                    .fewshot
                    .as_ref()
                    .ok_or_else(|| PdenError::Config("arm fewshot needs a fewshot section".into()))?;
                f.shift.validate().map_err(|e| PdenError::Config(e.to_string()))?;
                if f.shots.is_empty() || f.shots.contains(&0) {
                    return Err(PdenError::Config(
                        "fewshot.shots must be a nonempty list of positive counts".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "arm": "pden",
        "train_data": {"kind": "toy", "classes": 10, "count": 100, "image_size": 16, "seed": 1},
        "test_data": {"kind": "toy", "classes": 10, "count": 100, "image_size": 16, "seed": 2}
    }"#;

    #[test]
    fn echo_is_lossless() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("\"arm\"", "\"w_advv\": 1, \"arm\"");
        assert!(matches!(RunConfig::from_json(&typo), Err(PdenError::Config(_))));
        let nested = MINIMAL.replace(
            "\"arm\": \"pden\",",
            "\"arm\": \"pden\", \"train\": {\"weights\": {\"w_adv\": 0.1, \"w_cyc\": 20, \"w_dvi\": 0.1}},",
        );
        assert!(RunConfig::from_json(&nested).is_err());
        let data = MINIMAL.replace("\"seed\": 2}", "\"seed\": 2, \"extra\": 0}");
        assert!(RunConfig::from_json(&data).is_err());
    }

    #[test]
    fn arm_sections_are_required() {
        assert!(RunConfig::from_json(&MINIMAL.replace("\"pden\"", "\"sweep\"")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("\"pden\"", "\"fewshot\"")).is_err());
        assert!("bogus".parse::<Arm>().is_err());
        assert_eq!("erm".parse::<Arm>().unwrap(), Arm::Erm);
    }
}
