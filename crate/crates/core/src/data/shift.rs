//! Deterministic image shifts used as stand-in unseen target domains.
//!
//! Every kind has five severities. The tables below are the only place the
//! per-severity parameters live.

use serde::{Deserialize, Serialize};

use super::{DomainDataset, Provenance};
use crate::error::{PdenError, Result};
use crate::tensor::{derive_seed, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Invert,
    GaussianNoise,
    Contrast,
    Brightness,
    Blur,
    Pixelate,
    Speckle,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 7] = [
        ShiftKind::Invert,
        ShiftKind::GaussianNoise,
        ShiftKind::Contrast,
        ShiftKind::Brightness,
        ShiftKind::Blur,
        ShiftKind::Pixelate,
        ShiftKind::Speckle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Invert => "invert",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::Contrast => "contrast",
            ShiftKind::Brightness => "brightness",
            ShiftKind::Blur => "blur",
            ShiftKind::Pixelate => "pixelate",
            ShiftKind::Speckle => "speckle",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = PdenError;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PdenError::InvalidArgument(format!("unknown shift kind {s:?}")))
    }
}

/// Blend weight toward `1 - p`; severity 5 is the exact negative.
const INVERT_BLEND: [f64; 5] = [0.55, 0.65, 0.75, 0.875, 1.0];
const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Contrast factor about mid-gray.
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const BRIGHTNESS_DELTA: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Gaussian blur sigma in pixels.
const BLUR_SIGMA: [f64; 5] = [0.5, 0.8, 1.1, 1.5, 2.0];
/// Block edge length in pixels.
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 5, 6];
/// Multiplicative noise std.
const SPECKLE_STD: [f64; 5] = [0.15, 0.25, 0.35, 0.5, 0.65];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8, seed: u64) -> Result<Self> {
        let s = Self { kind, severity, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(PdenError::InvalidArgument(format!(
                "severity must be 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    /// `kind` or `kind@severity`.
    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.severity)
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

/// The fixed unseen-domain suite: full inversion plus noise, contrast, blur
/// and pixelation at severity 3.
pub fn default_benchmark(seed: u64) -> Vec<ShiftSpec> {
    vec![
        ShiftSpec {
            kind: ShiftKind::Invert,
            severity: 5,
            seed,
        },
        ShiftSpec {
            kind: ShiftKind::GaussianNoise,
            severity: 3,
            seed,
        },
        ShiftSpec {
            kind: ShiftKind::Contrast,
            severity: 3,
            seed,
        },
        ShiftSpec {
            kind: ShiftKind::Blur,
            severity: 3,
            seed,
        },
        ShiftSpec {
            kind: ShiftKind::Pixelate,
            severity: 3,
            seed,
        },
    ]
}

/// Applies `spec` to every image. Labels and shapes are unchanged; noise for
/// image `i` comes from a stream derived from `(spec.seed, i)`.
pub fn apply_shift(ds: &DomainDataset, spec: &ShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let (c, h, w) = ds.image_dims();
    let per = c * h * w;
    let mut out = ds.images.clone();
    let lv = spec.level();
    for (i, img) in out.data_mut().chunks_mut(per).enumerate() {
        let mut rng = Rng::new(derive_seed(spec.seed, i as u64));
        match spec.kind {
            ShiftKind::Invert => {
                let a = INVERT_BLEND[lv];
                img.iter_mut().for_each(|p| *p = (1.0 - a) * *p + a * (1.0 - *p));
            }
            ShiftKind::GaussianNoise => {
                let s = NOISE_STD[lv];
                img.iter_mut().for_each(|p| *p += s * rng.normal());
            }
            ShiftKind::Contrast => {
                let f = CONTRAST_FACTOR[lv];
                img.iter_mut().for_each(|p| *p = 0.5 + (*p - 0.5) * f);
            }
            ShiftKind::Brightness => {
                let d = BRIGHTNESS_DELTA[lv];
                img.iter_mut().for_each(|p| *p += d);
            }
            ShiftKind::Blur => {
                for plane in img.chunks_mut(h * w) {
                    gaussian_blur(plane, h, w, BLUR_SIGMA[lv]);
                }
            }
            ShiftKind::Pixelate => {
                for plane in img.chunks_mut(h * w) {
                    pixelate(plane, h, w, PIXELATE_BLOCK[lv]);
                }
            }
            ShiftKind::Speckle => {
                let s = SPECKLE_STD[lv];
                img.iter_mut().for_each(|p| *p += *p * s * rng.normal());
            }
        }
        img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
    DomainDataset::new(
        format!("{}/{}", ds.name, spec.label()),
        Tensor::new(ds.images.shape().to_vec(), out.into_data())?,
        ds.labels.clone(),
        ds.classes,
        Provenance::Shifted { shift: *spec },
    )
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[i * w + clampi(j as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            plane[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(i as isize + k as isize - radius, h) * w + j])
                .sum();
        }
    }
}

/// Replaces each `block×block` tile (partial tiles at the border) by its mean.
fn pixelate(plane: &mut [f64], h: usize, w: usize, block: usize) {
    for bi in (0..h).step_by(block) {
        for bj in (0..w).step_by(block) {
            let (ei, ej) = ((bi + block).min(h), (bj + block).min(w));
            let mut s = 0.0;
            for i in bi..ei {
                for j in bj..ej {
                    s += plane[i * w + j];
                }
            }
            let mean = s / ((ei - bi) * (ej - bj)) as f64;
            for i in bi..ei {
                for j in bj..ej {
                    plane[i * w + j] = mean;
                }
            }
        }
    }
}
