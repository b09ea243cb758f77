//! Datasets (MNIST IDX files and a synthetic generator) and model checkpoints.

mod checkpoint;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use idx::{load_idx_images, load_idx_labels, load_mnist, IdxImages, MNIST_TRAIN_IMAGES_BYTES};
pub use synth::{synth_dataset, synth_dataset_with_shape};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` stored `[N, C, H, W]`, plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = match images.shape() {
            [n, _, _, _] => *n,
            s => return Err(Error::invalid(format!("images must be [N, C, H, W], got {s:?}"))),
        };
        if n != labels.len() {
            return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into a `[len, C, H, W]` batch.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range ({})", self.len())));
            }
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| E::from_f64(v as f64)));
        }
        let [c, h, w] = self.sample_shape();
        Tensor::from_vec([indices.len(), c, h, w], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The first `n` samples (or all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::invalid("empty subset"));
        }
        let per = self.sample_len();
        let [c, h, w] = self.sample_shape();
        Dataset::new(
            Tensor::from_vec([n, c, h, w], self.images.data()[..n * per].to_vec())?,
            self.labels[..n].to_vec(),
            self.classes,
            self.split,
        )
    }
}
