//! IDX container as used by the MNIST distribution: a big-endian magic
//! (`0x00000803` for 3-d unsigned-byte images, `0x00000801` for 1-d labels),
//! one big-endian `u32` per dimension, then the unsigned-byte payload.

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Images {
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::IdxTruncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

/// Parses either IDX layout, dispatching on the magic number.
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = read_u32(bytes, 0)?;
    match magic {
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            let payload = payload(bytes, 16, count * rows * cols)?;
            Ok(Idx::Images {
                rows,
                cols,
                pixels: payload.to_vec(),
            })
        }
        LABELS_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            Ok(Idx::Labels(payload(bytes, 8, count)?.to_vec()))
        }
        observed => Err(Error::IdxMagic {
            observed,
            expected: IMAGES_MAGIC,
        }),
    }
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match parse_idx(bytes)? {
        Idx::Images { rows, cols, pixels } => Ok((rows, cols, pixels)),
        Idx::Labels(_) => Err(Error::IdxMagic {
            observed: LABELS_MAGIC,
            expected: IMAGES_MAGIC,
        }),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match parse_idx(bytes)? {
        Idx::Labels(labels) => Ok(labels),
        Idx::Images { .. } => Err(Error::IdxMagic {
            observed: IMAGES_MAGIC,
            expected: LABELS_MAGIC,
        }),
    }
}

impl Idx {
    pub fn count(&self) -> usize {
        match self {
            Idx::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            Idx::Labels(labels) => labels.len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Idx::Images { rows, cols, pixels } => {
                out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
                for d in [self.count(), *rows, *cols] {
                    out.extend_from_slice(&(d as u32).to_be_bytes());
                }
                out.extend_from_slice(pixels);
            }
            Idx::Labels(labels) => {
                out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
                out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
                out.extend_from_slice(labels);
            }
        }
        out
    }
}

/// Splits image bytes into flat tensors scaled into `[0, 1]` by `1/255`.
pub fn pixels_to_tensors(rows: usize, cols: usize, pixels: &[u8]) -> Vec<Tensor> {
    pixels
        .chunks(rows * cols)
        .map(|img| Tensor::from_vec(img.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect()
}
