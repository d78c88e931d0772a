use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(offset, format!("truncated header: missing {what}")))
}

/// Parses an IDX image file into `[N×H×W]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(0, format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let h = read_u32(bytes, 8, "row count")? as usize;
    let w = read_u32(bytes, 12, "column count")? as usize;
    if h == 0 || w == 0 {
        return Err(parse_err(8, format!("degenerate image size {h}×{w}")));
    }
    let need = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| parse_err(4, "image dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(parse_err(bytes.len(), format!("truncated pixel data: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(parse_err(16 + need, format!("{} trailing bytes after pixel data", payload.len() - need)));
    }
    Tensor::new(vec![n, h, w], payload.iter().map(|&p| p as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(0, format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(parse_err(bytes.len(), format!("truncated labels: {} of {n} bytes", payload.len())));
    }
    if payload.len() > n {
        return Err(parse_err(8 + n, format!("{} trailing bytes after labels", payload.len() - n)));
    }
    Ok(payload.to_vec())
}

/// Encodes `[N×H×W]` images, rounding pixels to the nearest of 256 levels.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, h, w] = images.shape() else {
        return Err(Error::invalid(format!("IDX images must be [N×H×W], got {:?}", images.shape())));
    };
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IMAGES_MAGIC, *n as u32, *h as u32, *w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let img = parse_idx_images(&fs::read(images).map_err(|e| Error::io(images, e))?)?;
    let labels = match labels {
        Some(p) => Some(parse_idx_labels(&fs::read(p).map_err(|e| Error::io(p, e))?)?),
        None => None,
    };
    Dataset::new(img, labels, Split::Full)
}

pub fn write_idx(ds: &Dataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    fs::write(images, encode_idx_images(&ds.images)?).map_err(|e| Error::io(images, e))?;
    if let (Some(path), Some(l)) = (labels, &ds.labels) {
        fs::write(path, encode_idx_labels(l)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2×2 images: [0, 255; 128, 1] and [7, 8; 9, 10].
    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 128, 1, 7, 8, 9, 10]);
        b
    }

    #[test]
    fn fixture_parses_and_round_trips() {
        let t = parse_idx_images(&fixture()).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 128.0 / 255.0);
        assert_eq!(encode_idx_images(&t).unwrap(), fixture());
    }

    #[test]
    fn labels_round_trip() {
        let b = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(&b[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = fixture();
        b[3] = 1;
        assert!(matches!(parse_idx_images(&b), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&fixture()), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_where_data_ends() {
        let b = fixture();
        match parse_idx_images(&b[..b.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, b.len() - 3),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&b[..10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }
}
