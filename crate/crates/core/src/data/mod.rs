//! Labeled image datasets: IDX ingestion, synthetic shift suites, the toy
//! shape generator and on-disk persistence.

mod idx;
mod pgm;
mod shift;
mod toy;

pub use idx::{decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx, save_idx};
pub use pgm::{encode_pgm_grid, save_pgm_grid};
pub use shift::{apply_shift, default_benchmark, ShiftKind, ShiftSpec};
pub use toy::{make_toy_dataset, ToySpec};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PdenError, Result};
use crate::tensor::{Rng, Tensor};

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Source,
    Synthetic { k: usize, seed: u64 },
    Shifted { shift: ShiftSpec },
}

/// Images `M×C×H×W` in `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(PdenError::Shape(format!(
                "dataset images must be M×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(PdenError::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(PdenError::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PdenError::Domain("pixels must be finite and in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn select(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `count` items.
    pub fn take(&self, count: usize) -> Result<Self> {
        let count = count.min(self.len());
        if count == 0 {
            return Err(PdenError::InvalidArgument("cannot take 0 items".into()));
        }
        let idx: Vec<usize> = (0..count).collect();
        let (images, labels) = self.select(&idx);
        Ok(Self {
            images,
            labels,
            ..self.clone()
        })
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Up to `per_class` items of every class, in dataset order.
    pub fn shots(&self, per_class: usize, rng: &mut Rng) -> Result<Self> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let mut taken = vec![0; self.classes];
        let mut idx = Vec::new();
        for i in order {
            let l = self.labels[i];
            if taken[l] < per_class {
                taken[l] += 1;
                idx.push(i);
            }
        }
        idx.sort_unstable();
        if idx.is_empty() {
            return Err(PdenError::InvalidArgument("no shots available".into()));
        }
        let (images, labels) = self.select(&idx);
        Ok(Self {
            name: format!("{}-{per_class}shot", self.name),
            images,
            labels,
            ..self.clone()
        })
    }

    /// Zero-pads each image to `size×size` (centered) and replicates a single
    /// channel to `channels`.
    pub fn to_layout(&self, channels: usize, size: usize) -> Result<Self> {
        let (c, h, w) = self.image_dims();
        if size < h || size < w || !(channels == c || c == 1) {
            return Err(PdenError::Shape(format!(
                "cannot convert {c}×{h}×{w} images to {channels}×{size}×{size}"
            )));
        }
        let (top, left) = ((size - h) / 2, (size - w) / 2);
        let m = self.len();
        let mut out = vec![0.0; m * channels * size * size];
        for s in 0..m {
            for oc in 0..channels {
                let ic = if c == 1 { 0 } else { oc };
                for i in 0..h {
                    for j in 0..w {
                        let v = self.images.data()[((s * c + ic) * h + i) * w + j];
                        out[((s * channels + oc) * size + top + i) * size + left + j] = v;
                    }
                }
            }
        }
        Ok(Self {
            images: Tensor::new(vec![m, channels, size, size], out)?,
            ..self.clone()
        })
    }

    /// SHA-256 over the 8-bit quantized pixels followed by the labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let pixels: Vec<u8> = self.images.data().iter().map(|&v| quantize(v)).collect();
        h.update(&pixels);
        let labels: Vec<u8> = self.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
        h.update(&labels);
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let (c, hh, w) = self.image_dims();
        DatasetManifest {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            count: self.len(),
            classes: self.classes,
            image_shape: [c, hh, w],
            label_counts: self.label_histogram(),
            checksum: self.checksum(),
        }
    }
}

/// JSON description written next to a saved dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub provenance: Provenance,
    pub count: usize,
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub label_counts: Vec<usize>,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DomainDataset {
        let images = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|v| v as f64 / 15.0).collect()).unwrap();
        DomainDataset::new("tiny", images, vec![0, 1, 0, 1], 2, Provenance::Source).unwrap()
    }

    #[test]
    fn validation() {
        let img = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(DomainDataset::new("a", img.clone(), vec![0], 2, Provenance::Source).is_err());
        assert!(DomainDataset::new("a", img.clone(), vec![0, 2], 2, Provenance::Source).is_err());
        let bad = Tensor::full(&[2, 1, 2, 2], 1.5);
        assert!(DomainDataset::new("a", bad, vec![0, 1], 2, Provenance::Source).is_err());
    }

    #[test]
    fn shots_and_histogram() {
        let ds = tiny();
        assert_eq!(ds.label_histogram(), vec![2, 2]);
        let s = ds.shots(1, &mut Rng::new(0)).unwrap();
        assert_eq!(s.label_histogram(), vec![1, 1]);
    }

    #[test]
    fn layout_conversion_pads_and_replicates() {
        let ds = tiny().to_layout(3, 4).unwrap();
        assert_eq!(ds.images.shape(), &[4, 3, 4, 4]);
        let first = &ds.images.data()[..16];
        assert_eq!(first[5], 0.0);
        assert_eq!(first[6], 1.0 / 15.0);
        assert_eq!(&ds.images.data()[16..32], first);
        assert!(tiny().to_layout(3, 1).is_err());
    }

    #[test]
    fn checksum_tracks_content() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.checksum(), b.checksum());
        b.labels[0] = 1;
        assert_ne!(a.checksum(), b.checksum());
    }
}
