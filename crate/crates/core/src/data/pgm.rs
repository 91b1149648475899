//! Binary PGM (P5, maxval 255) image grids.

use std::path::Path;

use super::quantize;
use crate::error::{PdenError, Result};
use crate::tensor::Tensor;

/// Tiles `images[M×C×H×W]` into a grid `cols` wide with a 1-pixel gray
/// gutter. Multi-channel images are averaged to gray.
pub fn encode_pgm_grid(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    if images.ndim() != 4 || images.is_empty() {
        return Err(PdenError::InvalidArgument(
            "PGM grid needs a nonempty M×C×H×W tensor".into(),
        ));
    }
    if cols == 0 {
        return Err(PdenError::InvalidArgument("PGM grid needs at least one column".into()));
    }
    let s = images.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.min(m);
    let rows = m.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut pixels = vec![128u8; gw * gh];
    for k in 0..m {
        let (r, cc) = (k / cols, k % cols);
        for i in 0..h {
            for j in 0..w {
                let v: f64 = (0..c)
                    .map(|ch| images.data()[((k * c + ch) * h + i) * w + j])
                    .sum::<f64>()
                    / c as f64;
                pixels[(r * (h + 1) + i) * gw + cc * (w + 1) + j] = quantize(v);
            }
        }
    }
    let mut out = format!("P5 {gw} {gh} 255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn save_pgm_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm_grid(images, cols)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_layout() {
        let images = Tensor::new(
            vec![3, 1, 2, 2],
            vec![0., 1., 1., 0., 0.5, 0.5, 0.5, 0.5, 1., 1., 1., 1.],
        )
        .unwrap();
        let bytes = encode_pgm_grid(&images, 2).unwrap();
        let header = b"P5 5 5 255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 25);
        assert_eq!(&px[..5], &[0, 255, 128, 128, 128]);
        assert_eq!(px[15], 255);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(encode_pgm_grid(&Tensor::zeros(&[1, 1, 2, 2]), 0).is_err());
    }
}
