//! IDX container (the MNIST distribution format).
//!
//! Layout: magic `00 00 08 NN` where `NN` is the rank, then one big-endian
//! `u32` per dimension, then raw unsigned bytes. Rank 3 holds images
//! (`count × rows × cols`), rank 1 holds labels.

use std::path::Path;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// One row per image, pixels scaled to `[0, 1]` by `/ 255`.
    Images {
        rows: usize,
        cols: usize,
        pixels: DenseMatrix,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Format(format!(
                "truncated header: expected at least {} bytes, got {}",
                at + 4,
                bytes.len()
            ))
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let rank = match magic {
        MAGIC_LABELS => 1,
        MAGIC_IMAGES => 3,
        other => return Err(Error::Format(format!("bad IDX magic 0x{other:08x}"))),
    };
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload holds {} bytes, dimensions {dims:?} need {expected}",
            payload.len()
        )));
    }
    Ok(if rank == 1 {
        IdxData::Labels(payload.to_vec())
    } else {
        let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
        IdxData::Images {
            rows: dims[1],
            cols: dims[2],
            pixels: DenseMatrix::from_vec(dims[0], dims[1] * dims[2], data)?,
        }
    })
}

pub fn load_idx(path: &Path) -> Result<IdxData> {
    parse_idx(&std::fs::read(path)?)
}

/// Images plus labels as a dataset with a grid shape.
pub fn load_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let (rows, cols, pixels) = match load_idx(images)? {
        IdxData::Images { rows, cols, pixels } => (rows, cols, pixels),
        IdxData::Labels(_) => return Err(Error::Format("expected an image file".into())),
    };
    let y = match load_idx(labels)? {
        IdxData::Labels(l) => l.into_iter().map(usize::from).collect(),
        IdxData::Images { .. } => return Err(Error::Format("expected a label file".into())),
    };
    Dataset::new(
        pixels,
        y,
        DatasetMeta {
            name: "idx".into(),
            generator: format!("idx({})", images.display()),
            seed: 0,
            num_classes,
            grid: Some((rows, cols)),
            noise_indices: Vec::new(),
        },
    )
}

/// Encodes images given as raw bytes, `count × rows × cols`.
pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_header_fixture() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x0A];
        bytes.extend(0..10u8);
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels((0..10).collect()));
    }

    #[test]
    fn image_header_fixture() {
        let bytes = [
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0xFF, 0x00, 0x00, 0xFF,
        ];
        match parse_idx(&bytes).unwrap() {
            IdxData::Images { rows, cols, pixels } => {
                assert_eq!((rows, cols), (2, 2));
                assert_eq!(pixels.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1, 5]).unwrap_err();
        assert!(matches!(err, Error::Format(m) if m.contains("magic")));
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 4, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::Format(m) if m.contains("2 bytes") && m.contains("need 4")));
        assert!(parse_idx(&[0, 0, 8]).is_err());
    }

    #[test]
    fn write_then_read_is_bit_identical() {
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|v| (v * 37 % 256) as u8).collect();
        let bytes = write_idx_images(3, 4, 5, &pixels);
        match parse_idx(&bytes).unwrap() {
            IdxData::Images { rows, cols, pixels: m } => {
                assert_eq!((m.rows(), rows, cols), (3, 4, 5));
                let back: Vec<u8> = m.as_slice().iter().map(|v| (v * 255.0).round() as u8).collect();
                assert_eq!(back, pixels);
                for (v, &p) in m.as_slice().iter().zip(&pixels) {
                    assert_eq!(v.to_bits(), (f64::from(p) / 255.0).to_bits());
                }
            }
            other => panic!("unexpected {other:?}"),
        }
        let labels = vec![3u8, 1, 4, 1, 5];
        assert_eq!(parse_idx(&write_idx_labels(&labels)).unwrap(), IdxData::Labels(labels));
    }
}
