//! Loader for idx-format image/label corpora (the MNIST file layout).

use std::path::Path;

use crate::numerics::Matrix;
use crate::{Error, Result};

use super::dataset::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads paired idx files into a dataset: pixels scaled to [0,1], images
/// flattened row-major, labels as class indices (class count = max label + 1).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let name = images
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    let image_bytes = std::fs::read(&images)?;
    let label_bytes = std::fs::read(&labels)?;
    from_idx_bytes(&image_bytes, &label_bytes, &name)
}

/// `load_idx` on in-memory file contents.
pub fn from_idx_bytes(image_bytes: &[u8], label_bytes: &[u8], name: &str) -> Result<Dataset> {
    let features = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if features.rows() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: features.rows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Config("idx files contain no items".into()));
    }
    let class_count = labels.iter().max().copied().unwrap() + 1;
    Dataset::new(name, features, labels, class_count)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(Error::IdxMalformed(format!(
            "file ends inside {what} (need {end} bytes, have {})",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().unwrap()))
}

fn parse_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = be_u32(bytes, 0, "the image magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "the image count")? as usize;
    let rows = be_u32(bytes, 8, "the row count")? as usize;
    let cols = be_u32(bytes, 12, "the column count")? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::IdxMalformed("image dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != pixels {
        return Err(Error::IdxMalformed(format!(
            "image payload is {} bytes, header declares {pixels}",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(n, rows * cols, data)
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "the label magic number")?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "the label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::IdxMalformed(format!(
            "label payload is {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&n.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(pixels);
        bytes
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn loads_and_scales() {
        let images = image_file(2, 2, 2, &[0, 51, 102, 255, 10, 20, 30, 40]);
        let labels = label_file(&[1, 0]);
        let ds = from_idx_bytes(&images, &labels, "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.width(), 4);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.features.get(0, 3), 1.0);
        assert_eq!(ds.features.get(0, 1), 51.0 / 255.0);
        assert_eq!(ds.labels, [1, 0]);
    }

    #[test]
    fn wrong_magic_reports_observed_value() {
        let mut images = image_file(1, 1, 1, &[7]);
        images[3] = 0x99;
        let labels = label_file(&[0]);
        match from_idx_bytes(&images, &labels, "t") {
            Err(Error::IdxMagic { found, .. }) => assert_eq!(found, 0x0000_0899),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_distinct() {
        let images = image_file(2, 1, 1, &[1, 2]);
        let labels = label_file(&[0]);
        match from_idx_bytes(&images, &labels, "t") {
            Err(Error::IdxCountMismatch { images: 2, labels: 1 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let images = image_file(2, 2, 2, &[9; 8]);
        let labels = label_file(&[0, 1]);
        for len in 0..images.len() {
            assert!(
                from_idx_bytes(&images[..len], &labels, "t").is_err(),
                "image prefix {len} accepted"
            );
        }
        for len in 0..labels.len() {
            assert!(
                from_idx_bytes(&images, &labels[..len], "t").is_err(),
                "label prefix {len} accepted"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut images = image_file(1, 1, 1, &[1]);
        let labels = label_file(&[0]);
        images.push(0);
        assert!(from_idx_bytes(&images, &labels, "t").is_err());
    }
}
