//! Deterministic synthetic images: one Gaussian blob per class, placed on a
//! ring, with sub-pixel jitter and additive noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEFAULT_SHAPE: [usize; 3] = [1, 16, 16];

pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with_shape(n, classes, seed, DEFAULT_SHAPE)
}

/// `n` samples cycling through `classes` labels, rendered at `[c, h, w]`.
/// Channel `k` of a sample carries the blob at `(k + 1) / c` of its amplitude.
pub fn synth_dataset_with_shape(n: usize, classes: usize, seed: u64, shape: [usize; 3]) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::invalid(format!("n = {n} must be >= classes = {classes}")));
    }
    let [c, h, w] = shape;
    if c == 0 || h < 4 || w < 4 {
        return Err(Error::invalid(format!("synthetic image shape {shape:?} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = 0.3 * h.min(w) as f64;
    let sigma = h.min(w) as f64 / 10.0;
    let jitter = 0.15 * radius * (2.0 * PI / classes as f64).min(1.0);

    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let angle = 2.0 * PI * label as f64 / classes as f64;
        let by = cy + radius * angle.sin() + rng.random_range(-jitter..=jitter);
        let bx = cx + radius * angle.cos() + rng.random_range(-jitter..=jitter);
        for ch in 0..c {
            let amp = (ch + 1) as f64 / c as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp() + rng.random_range(0.0..0.1);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::from_vec([n, c, h, w], data)?, labels, classes, Split::Train)
}
