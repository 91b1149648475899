//! Small digit-like glyph datasets for fast runs.

use serde::{Deserialize, Serialize};

use super::{DomainDataset, Provenance};
use crate::error::{PdenError, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    /// 2..=10 glyph classes.
    pub classes: usize,
    pub count: usize,
    pub image_size: usize,
}

type Seg = ((f64, f64), (f64, f64));

enum Stroke {
    Line(Seg),
    Ring { r: f64 },
}

/// Glyphs in a `[-1, 1]²` frame, y pointing down.
fn glyph(class: usize) -> Vec<Stroke> {
    use Stroke::{Line, Ring};
    match class {
        0 => vec![Ring { r: 0.6 }],
        1 => vec![Line(((0.0, -0.7), (0.0, 0.7)))],
        2 => vec![Line(((-0.7, 0.0), (0.7, 0.0)))],
        3 => vec![Line(((-0.6, 0.6), (0.6, -0.6)))],
        4 => vec![Line(((-0.6, -0.6), (0.6, 0.6)))],
        5 => vec![Line(((0.0, -0.6), (0.0, 0.6))), Line(((-0.6, 0.0), (0.6, 0.0)))],
        6 => vec![Line(((-0.6, 0.6), (0.6, -0.6))), Line(((-0.6, -0.6), (0.6, 0.6)))],
        7 => vec![
            Line(((-0.55, -0.55), (0.55, -0.55))),
            Line(((0.55, -0.55), (0.55, 0.55))),
            Line(((0.55, 0.55), (-0.55, 0.55))),
            Line(((-0.55, 0.55), (-0.55, -0.55))),
        ],
        8 => vec![Line(((-0.6, -0.6), (0.6, -0.6))), Line(((0.0, -0.6), (0.0, 0.7)))],
        9 => vec![Line(((-0.4, -0.7), (-0.4, 0.6))), Line(((-0.4, 0.6), (0.6, 0.6)))],
        _ => unreachable!("glyph classes are 0..10"),
    }
}

fn seg_distance(p: (f64, f64), ((ax, ay), (bx, by)): Seg) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((p.0 - ax) * dx + (p.1 - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(class: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let scale = rng.uniform_range(0.75, 1.05);
    let angle = rng.uniform_range(-0.2, 0.2);
    let (tx, ty) = (rng.uniform_range(-0.15, 0.15), rng.uniform_range(-0.15, 0.15));
    let half_width = rng.uniform_range(0.6, 1.1) * size as f64 / 16.0;
    let intensity = rng.uniform_range(0.75, 1.0);
    let (sin, cos) = angle.sin_cos();
    let strokes = glyph(class);
    let px_per_unit = scale * size as f64 / 2.0;

    let mut img = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let u = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0 - tx;
            let v = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0 - ty;
            // inverse rotation and scale into the glyph frame
            let q = ((cos * u + sin * v) / scale, (-sin * u + cos * v) / scale);
            let d = strokes
                .iter()
                .map(|s| match *s {
                    Stroke::Line(seg) => seg_distance(q, seg),
                    Stroke::Ring { r } => ((q.0 * q.0 + q.1 * q.1).sqrt() - r).abs(),
                })
                .fold(f64::INFINITY, f64::min);
            let coverage = (half_width + 0.5 - d * px_per_unit).clamp(0.0, 1.0);
            img[i * size + j] = intensity * coverage;
        }
    }
    img
}

/// Item `i` has label `i mod classes`, so classes are exactly balanced when
/// `count` is a multiple of `classes`. Each glyph gets random scale, rotation,
/// offset, stroke width and intensity.
pub fn make_toy_dataset(spec: &ToySpec, rng: &mut Rng) -> Result<DomainDataset> {
    if !(2..=10).contains(&spec.classes) {
        return Err(PdenError::InvalidArgument(format!(
            "toy datasets have 2..=10 classes, got {}",
            spec.classes
        )));
    }
    if spec.count == 0 || spec.image_size < 8 {
        return Err(PdenError::InvalidArgument(
            "toy datasets need count >= 1 and image_size >= 8".into(),
        ));
    }
    let size = spec.image_size;
    let mut data = Vec::with_capacity(spec.count * size * size);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        data.extend(render(class, size, rng));
        labels.push(class);
    }
    DomainDataset::new(
        "toy",
        Tensor::new(vec![spec.count, 1, size, size], data)?,
        labels,
        spec.classes,
        Provenance::Source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = ToySpec {
            classes: 5,
            count: 50,
            image_size: 16,
        };
        let a = make_toy_dataset(&spec, &mut Rng::new(1)).unwrap();
        assert_eq!(a.label_histogram(), vec![10; 5]);
        assert_eq!(a, make_toy_dataset(&spec, &mut Rng::new(1)).unwrap());
        assert_ne!(a.images, make_toy_dataset(&spec, &mut Rng::new(2)).unwrap().images);
    }

    #[test]
    fn glyphs_have_ink_and_background() {
        let spec = ToySpec {
            classes: 10,
            count: 10,
            image_size: 16,
        };
        let ds = make_toy_dataset(&spec, &mut Rng::new(4)).unwrap();
        for img in ds.images.data().chunks(256) {
            let ink = img.iter().filter(|&&p| p > 0.5).count();
            assert!(ink > 8 && ink < 128, "{ink}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut rng = Rng::new(0);
        assert!(make_toy_dataset(
            &ToySpec {
                classes: 1,
                count: 4,
                image_size: 16
            },
            &mut rng
        )
        .is_err());
        assert!(make_toy_dataset(
            &ToySpec {
                classes: 11,
                count: 4,
                image_size: 16
            },
            &mut rng
        )
        .is_err());
        assert!(make_toy_dataset(
            &ToySpec {
                classes: 2,
                count: 0,
                image_size: 16
            },
            &mut rng
        )
        .is_err());
    }
}
