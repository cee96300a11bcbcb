//! IDX (MNIST-style) image and label files.
//!
//! Header integers are big-endian. Images: magic `0x00000803`, count, rows,
//! cols, then one unsigned byte per pixel. Labels: magic `0x00000801`, count,
//! then one byte per label.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

fn expect_magic(bytes: &[u8], magic: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad {what} magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = header.checked_add(len).ok_or_else(|| Error::Format {
        offset: header as u64,
        msg: format!("{what} size overflows"),
    })?;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated {what}: need {len} bytes after the header, file has {}", bytes.len() - header),
        });
    }
    if bytes.len() > end {
        return Err(Error::Format {
            offset: end as u64,
            msg: format!("{} trailing bytes after {what}", bytes.len() - end),
        });
    }
    Ok(&bytes[header..end])
}

/// Parses in-memory IDX image and label files. Pixels are scaled to [0, 1]
/// and then standardized per feature; the class count is `max label + 1`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    expect_magic(images, IMAGES_MAGIC, "image")?;
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let dim = rows * cols;
    let pixels = body(images, 16, n * dim, "image data")?;

    expect_magic(labels, LABELS_MAGIC, "label")?;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_labels != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label file holds {n_labels} labels for {n} images"),
        });
    }
    let raw_labels = body(labels, 8, n, "label data")?;

    let features = Tensor2D::from_vec(n, dim, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(features, labels, num_classes)?;
    ds.standardize();
    Ok(ds)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn labels_file(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let img = images_file(2, 2, 2, &[0; 8]);
        let lab = labels_file(&[0, 1]);
        assert!(parse_idx(&img, &lab).is_ok());

        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&img, &img), Err(Error::Format { offset: 0, .. })));

        match parse_idx(&img[..20], &lab) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&img[..10], &lab), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn rejects_count_mismatch() {
        let img = images_file(2, 2, 2, &[0; 8]);
        assert!(parse_idx(&img, &labels_file(&[0, 1, 1])).is_err());
    }
}
