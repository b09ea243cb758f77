//! Big-endian IDX files as distributed with MNIST.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

const MNIST_TRAIN: usize = 60_000;
const MNIST_TEST: usize = 10_000;
const MNIST_SIDE: usize = 28;

/// 16-byte header plus 60000 * 28 * 28 pixels.
pub const MNIST_TRAIN_IMAGES_BYTES: u64 = 16 + (MNIST_TRAIN * MNIST_SIDE * MNIST_SIDE) as u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn data_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32_be(bytes: &[u8], path: &Path, offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| data_err(path, bytes.len() as u64, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_payload(bytes: &[u8], path: &Path, header: usize, payload: usize) -> Result<()> {
    let want = header + payload;
    if bytes.len() < want {
        return Err(data_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {want} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > want {
        return Err(data_err(
            path,
            want as u64,
            format!("{} unexpected trailing bytes", bytes.len() - want),
        ));
    }
    Ok(())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, path, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(data_err(path, 0, format!("bad magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = read_u32_be(&bytes, path, 4)? as usize;
    let rows = read_u32_be(&bytes, path, 8)? as usize;
    let cols = read_u32_be(&bytes, path, 12)? as usize;
    check_payload(&bytes, path, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, path, 0)?;
    if magic != LABEL_MAGIC {
        return Err(data_err(path, 0, format!("bad magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = read_u32_be(&bytes, path, 4)? as usize;
    check_payload(&bytes, path, 8, count)?;
    Ok(bytes[8..].to_vec())
}

fn load_split(dir: &Path, prefix: &str, expected: usize, split: Split) -> Result<Dataset> {
    let img_path: PathBuf = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path: PathBuf = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let images = load_idx_images(&img_path)?;
    let labels = load_idx_labels(&lbl_path)?;
    if images.count != labels.len() {
        return Err(data_err(
            &lbl_path,
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    if images.count != expected || images.rows != MNIST_SIDE || images.cols != MNIST_SIDE {
        return Err(data_err(
            &img_path,
            4,
            format!(
                "expected {expected} images of {MNIST_SIDE}x{MNIST_SIDE}, found {} of {}x{}",
                images.count, images.rows, images.cols
            ),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(data_err(&lbl_path, 8 + pos as u64, format!("label {} is not a digit", labels[pos])));
    }
    let data: Vec<f32> = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::from_vec([images.count, 1, MNIST_SIDE, MNIST_SIDE], data)?,
        labels.into_iter().map(usize::from).collect(),
        10,
        split,
    )
}

/// Loads `train-*` and `t10k-*` IDX files from `dir`; pixels are scaled by 1/255.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST directory not found"),
        ));
    }
    let train_images = dir.join("train-images-idx3-ubyte");
    if let Ok(meta) = std::fs::metadata(&train_images) {
        if meta.len() != MNIST_TRAIN_IMAGES_BYTES {
            return Err(data_err(
                &train_images,
                0,
                format!("expected {MNIST_TRAIN_IMAGES_BYTES} bytes, file has {}", meta.len()),
            ));
        }
    }
    let train = load_split(dir, "train", MNIST_TRAIN, Split::Train)?;
    let test = load_split(dir, "t10k", MNIST_TEST, Split::Test)?;
    Ok((train, test))
}
