//! IDX image/label files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols and
//! `count·rows·cols` unsigned bytes. Labels: magic `0x00000801`, count, then
//! one byte per item.

use std::path::Path;

use tat_core::data::{Dataset, Labels, Split};
use tat_core::Tensor;
use thiserror::Error;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("file is truncated: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty data set")]
    Empty,
}

fn header(bytes: &[u8], expected_magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 * (1 + dims);
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let magic = word(0);
    if magic != expected_magic {
        return Err(IdxError::BadMagic {
            found: magic,
            expected: expected_magic,
        });
    }
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let total = need + dims.iter().product::<usize>();
    if bytes.len() < total {
        return Err(IdxError::Truncated {
            expected: total,
            found: bytes.len(),
        });
    }
    Ok(dims)
}

/// Decodes an image file to `[N,rows,cols,1]` with bytes scaled by 1/255.
pub fn decode_images(bytes: &[u8]) -> Result<Tensor<f32>, IdxError> {
    let d = header(bytes, IMAGES_MAGIC, 3)?;
    if d.contains(&0) {
        return Err(IdxError::Empty);
    }
    let n = d.iter().product::<usize>();
    let data = bytes[16..16 + n].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(&[d[0], d[1], d[2], 1], data).expect("dims checked"))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let d = header(bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[8..8 + d[0]].iter().map(|&b| usize::from(b)).collect())
}

/// Encodes `[N,H,W,1]` (or `[N,H,W]`) images in `[0,1]`, rounding to the
/// nearest byte.
pub fn encode_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for &d in &s[..3] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_err(path: &Path, source: IdxError) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an image/label file pair. The class count is one past the largest
/// label.
pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = decode_images(&read(ip)?).map_err(|e| idx_err(ip, e))?;
    let labels = decode_labels(&read(lp)?).map_err(|e| idx_err(lp, e))?;
    if labels.len() != images.shape()[0] {
        return Err(idx_err(
            lp,
            IdxError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            },
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Ok(Dataset::new(images, Labels::Class(labels), classes, split)?)
}

/// Writes a classification data set as an IDX pair; only the first channel
/// of each image is stored.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let Labels::Class(labels) = &ds.labels else {
        return Err(Error::Usage("IDX stores per-image labels only".into()));
    };
    let (n, h, w) = (ds.len(), ds.image_dims().0, ds.image_dims().1);
    let c = ds.image_dims().2;
    let first: Vec<f32> = ds.images.data().iter().step_by(c).copied().collect();
    let images = Tensor::new(&[n, h, w], first)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, encode_images(&images)).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, encode_labels(labels)).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
