//! MNIST in the big-endian IDX format.
//!
//! Images: magic `0x00000803`, then `u32` count, rows, cols, then one byte
//! per pixel. Labels: magic `0x00000801`, `u32` count, one byte per label.
//! Pixels are scaled by `1/255` with no further normalisation.

use std::path::{Path, PathBuf};

use archlearn_core::data::{Dataset, Split};
use archlearn_core::Tensor;
use thiserror::Error;

use crate::error::{AppError, AppResult};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
/// Images held out from the end of the training file for validation.
pub const MNIST_VAL_SIZE: usize = 5000;
pub const DATA_DIR_ENV: &str = "ARCHLEARN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated at byte {offset}: {needed} more bytes expected, file ends at {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("{extra} unexpected trailing bytes starting at byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("label {label} at byte {offset} is not a valid class")]
    Label { offset: usize, label: u8 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count·rows·cols` raw bytes, row-major per image.
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let b = bytes.get(offset..offset + 4).ok_or(IdxError::Truncated {
        offset,
        needed: offset + 4 - bytes.len().min(offset + 4),
        len: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn body(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(IdxError::Truncated { offset: bytes.len(), needed: end - bytes.len(), len: bytes.len() });
    }
    if bytes.len() > end {
        return Err(IdxError::Trailing { offset: end, extra: bytes.len() - end });
    }
    Ok(&bytes[offset..end])
}

fn magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::Magic { expected, found });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = body(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let labels = body(bytes, 8, count)?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(IdxError::Label { offset: 8 + i, label: labels[i] });
    }
    Ok(labels.to_vec())
}

/// Builds a dataset from parsed IDX contents.
pub fn to_dataset(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset, IdxError> {
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch { images: images.count, labels: labels.len() });
    }
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let shape = vec![images.count, 1, images.rows, images.cols];
    let tensor = Tensor::new(shape, data).expect("IDX body length checked");
    let labels = labels.iter().map(|&l| l as usize).collect();
    Ok(Dataset::new(tensor, labels, MNIST_CLASSES, split).expect("labels and pixels validated"))
}

fn read(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> AppResult<Dataset> {
    let images = parse_images(&read(images_path)?).map_err(|e| AppError::format(images_path, e.to_string()))?;
    let labels = parse_labels(&read(labels_path)?).map_err(|e| AppError::format(labels_path, e.to_string()))?;
    to_dataset(&images, &labels, split).map_err(|e| AppError::format(images_path, e.to_string()))
}

/// `$ARCHLEARN_DATA_DIR`, or `data/mnist` at the workspace root.
pub fn default_mnist_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// The standard files `{train,t10k}-{images-idx3,labels-idx1}-ubyte` in `dir`.
pub fn load_mnist(dir: &Path, test: bool) -> AppResult<Dataset> {
    let (prefix, split) = if test { ("t10k", Split::Test) } else { ("train", Split::Train) };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}
