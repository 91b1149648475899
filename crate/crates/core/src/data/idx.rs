//! IDX files: a 4-byte magic (`0x00 0x00 0x08 rank`), `rank` big-endian u32
//! dimensions, then unsigned bytes.

use std::path::Path;

use super::{quantize, DomainDataset, Provenance};
use crate::error::{PdenError, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

fn header(bytes: &[u8], accepted_ranks: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(PdenError::Format("IDX file shorter than its magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || !accepted_ranks.contains(&bytes[3]) {
        return Err(PdenError::Format(format!(
            "bad IDX magic 0x{:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    let end = 4 + 4 * rank;
    if bytes.len() < end {
        return Err(PdenError::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != end + n {
        return Err(PdenError::Format(format!(
            "IDX payload is {} bytes, header promises {n}",
            bytes.len() - end
        )));
    }
    Ok((dims, end))
}

/// Images (`0x00000803` for `M×H×W`, `0x00000804` for `M×C×H×W`) scaled to
/// `[0, 1]`, at most `limit` of them.
pub fn decode_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<Tensor> {
    let (dims, start) = header(bytes, &[3, 4])?;
    let (m, c, h, w) = match dims[..] {
        [m, h, w] => (m, 1, h, w),
        [m, c, h, w] => (m, c, h, w),
        _ => unreachable!(),
    };
    if m == 0 || c == 0 || h == 0 || w == 0 {
        return Err(PdenError::Format("IDX image file has an empty dimension".into()));
    }
    let keep = limit.map_or(m, |l| l.min(m));
    let per = c * h * w;
    let data = bytes[start..start + keep * per]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![keep, c, h, w], data)
}

/// Labels (`0x00000801`), at most `limit` of them.
pub fn decode_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<usize>> {
    let (dims, start) = header(bytes, &[1])?;
    let keep = limit.map_or(dims[0], |l| l.min(dims[0]));
    Ok(bytes[start..start + keep].iter().map(|&b| b as usize).collect())
}

pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let dims: Vec<usize> = if s[1] == 1 { vec![s[0], s[2], s[3]] } else { s.to_vec() };
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Loads an image/label IDX pair. The class count is one past the largest
/// label.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<DomainDataset> {
    let images = decode_idx_images(&std::fs::read(images_path)?, None)?;
    let labels = decode_idx_labels(&std::fs::read(labels_path)?, None)?;
    if images.shape()[0] != labels.len() {
        return Err(PdenError::Format(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let keep = limit.map_or(labels.len(), |l| l.min(labels.len()));
    if keep == 0 {
        return Err(PdenError::Format("IDX dataset is empty".into()));
    }
    let images = images.slice_rows(0, keep);
    let labels = labels[..keep].to_vec();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    DomainDataset::new(name, images, labels, classes, Provenance::Source)
}

/// Writes the dataset as an IDX pair, pixels quantized to 8 bits.
pub fn save_idx(ds: &DomainDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.is_empty() {
        return Err(PdenError::InvalidArgument("cannot save an empty dataset".into()));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(PdenError::InvalidArgument("IDX labels must fit in a byte".into()));
    }
    std::fs::write(images_path, encode_idx_images(&ds.images))?;
    std::fs::write(labels_path, encode_idx_labels(&ds.labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2×3 images written out by hand per the IDX layout.
    pub(crate) fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x02, // count
            0x00, 0x00, 0x00, 0x02, // rows
            0x00, 0x00, 0x00, 0x03, // cols
            0, 128, 255, 1, 2, 3, // image 0
            255, 254, 253, 10, 20, 30, // image 1
        ];
        let labels = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];
        (images, labels)
    }

    #[test]
    fn fixture_round_trips_byte_exactly() {
        let (img, lab) = fixture();
        let t = decode_idx_images(&img, None).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[1], 128.0 / 255.0);
        assert_eq!(encode_idx_images(&t), img);
        let l = decode_idx_labels(&lab, None).unwrap();
        assert_eq!(l, vec![7, 3]);
        assert_eq!(encode_idx_labels(&l), lab);
    }

    #[test]
    fn malformed_input_is_rejected() {
        let (mut img, lab) = fixture();
        assert!(decode_idx_labels(&img, None).is_err());
        assert!(decode_idx_images(&lab, None).is_err());
        assert!(decode_idx_images(&img[..img.len() - 1], None).is_err());
        img[2] = 0x09;
        assert!(matches!(decode_idx_images(&img, None), Err(PdenError::Format(_))));
        assert!(decode_idx_images(&[0, 0], None).is_err());
    }

    #[test]
    fn limit_caps_count() {
        let (img, lab) = fixture();
        assert_eq!(decode_idx_images(&img, Some(1)).unwrap().shape()[0], 1);
        assert_eq!(decode_idx_labels(&lab, Some(1)).unwrap(), vec![7]);
        assert_eq!(decode_idx_images(&img, Some(10)).unwrap().shape()[0], 2);
    }
}
