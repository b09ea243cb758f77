//! Oracles shared by the integration tests: random small architectures,
//! central finite differences and zero-masking of pruned filters.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stabprune::nn::{AuxForm, LayerParams, LayerSpec, Mode, ModelGraph};
use stabprune::pruner::PrunedSet;
use stabprune::{Architecture, Distribution, Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A shape-valid CNN with 1 to 3 conv blocks, optional batch-norm, ReLU and
/// pooling, and one or two linear layers.
pub fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(5..=9);
    let mut layers = Vec::new();
    let (mut h, mut w) = (side, side);
    let blocks = rng.random_range(1..=3);
    for _ in 0..blocks {
        let k = rng.random_range(1..=3usize).min(h);
        let pad = rng.random_range(0..=1usize);
        let stride = rng.random_range(1..=2usize);
        let out = rng.random_range(2..=5);
        layers.push(LayerSpec::Conv2d {
            out_channels: out,
            kernel: (k, k),
            stride,
            padding: pad,
        });
        h = (h + 2 * pad - k) / stride + 1;
        w = (w + 2 * pad - k) / stride + 1;
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::bn(out));
        }
        if rng.random_bool(0.7) {
            layers.push(LayerSpec::ReLU);
        }
        if h >= 2 && w >= 2 && rng.random_bool(0.4) {
            let stride = rng.random_range(1..=2);
            layers.push(LayerSpec::pool(2, stride));
            h = (h - 2) / stride + 1;
            w = (w - 2) / stride + 1;
        }
    }
    let arch = Architecture::new([c, side, side], layers.clone()).expect("conv stack");
    let mut flat = arch.output_shape().expect("shape").numel();
    layers.push(LayerSpec::Flatten);
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(3..=6);
        layers.push(LayerSpec::linear(flat, hidden));
        layers.push(LayerSpec::ReLU);
        flat = hidden;
    }
    layers.push(LayerSpec::linear(flat, rng.random_range(2..=4)));
    Architecture::new([c, side, side], layers).expect("random architecture")
}

/// Fresh model whose batch-norm layers carry non-trivial gain, shift and
/// running statistics.
pub fn random_model<E: Element>(arch: Architecture, seed: u64) -> ModelGraph<E> {
    let mut m = ModelGraph::<E>::init(arch, seed).expect("init");
    let mut r = rng(seed ^ 0xB17);
    for i in 0..m.arch().layers.len() {
        // zero biases put dead-input units exactly on the ReLU corner
        if let LayerParams::Conv { bias, .. } | LayerParams::Linear { bias, .. } = m.layer_params_mut(i) {
            bias.data_mut()
                .iter_mut()
                .for_each(|v| *v = E::from_f64(r.random_range(-0.2..0.2)));
        }
        if let LayerParams::BatchNorm {
            gain,
            shift,
            running_mean,
            running_var,
        } = m.layer_params_mut(i)
        {
            for (t, lo, hi) in [
                (gain, 0.5, 1.5),
                (shift, -0.5, 0.5),
                (running_mean, -0.3, 0.3),
                (running_var, 0.5, 2.0),
            ] {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = E::from_f64(r.random_range(lo..hi)));
            }
        }
    }
    m
}

pub fn random_batch<E: Element>(arch: &Architecture, batch: usize, seed: u64) -> Tensor<E> {
    let [c, h, w] = arch.input;
    Tensor::rng_fill(
        [batch, c, h, w],
        seed,
        Distribution::Normal { mean: 0.0, std: 1.0 },
    )
    .expect("batch")
}

pub fn random_labels(rng: &mut ChaCha8Rng, batch: usize, classes: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Entries where the step 1e-5 straddles a kink (ReLU, pool switch or a
    /// penalty corner) and a 4x smaller step agrees with the analytic value.
    pub kinks: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Compares backward against central differences of the train-mode total
/// loss for up to `per_tensor` entries of every trainable tensor.
pub fn grad_check(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    lambda: f64,
    form: AuxForm,
    per_tensor: usize,
    seed: u64,
) -> GradCheck {
    let mut r = rng(seed);
    let mut work = model.clone();
    let (_, acts) = work.forward(x, Mode::Train).expect("forward");
    let grads = model.backward(&acts, labels, lambda, form).expect("backward");
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();

    let loss = |m: &ModelGraph<f64>| m.total_loss(x, labels, lambda, form, Mode::Train).expect("loss");
    let fd = |m: &mut ModelGraph<f64>, ti: usize, k: usize, h: f64| {
        let orig = m.trainable_mut()[ti].data()[k];
        m.trainable_mut()[ti].data_mut()[k] = orig + h;
        let up = loss(m);
        m.trainable_mut()[ti].data_mut()[k] = orig - h;
        let down = loss(m);
        m.trainable_mut()[ti].data_mut()[k] = orig;
        (up - down) / (2.0 * h)
    };

    let mut out = GradCheck::default();
    let mut probe = model.clone();
    for (ti, a) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..a.len()).collect();
        if idx.len() > per_tensor {
            for i in 0..per_tensor {
                let j = r.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(per_tensor);
        }
        for k in idx {
            let n = fd(&mut probe, ti, k, FD_STEP);
            let e = rel(a[k], n);
            out.checked += 1;
            if e <= FD_TOL {
                out.max_rel = out.max_rel.max(e);
                continue;
            }
            let fine = fd(&mut probe, ti, k, FD_STEP / 4.0);
            if rel(a[k], fine) <= FD_TOL {
                out.kinks += 1;
            } else {
                out.failures
                    .push(format!("tensor {ti} entry {k}: analytic {} numeric {n} (rel {e:.2e})", a[k]));
            }
        }
    }
    out
}

/// Up to `width - 1` distinct indices per conv layer, sometimes none.
pub fn random_prune_set(rng: &mut ChaCha8Rng, widths: &[usize]) -> PrunedSet {
    let layers = widths
        .iter()
        .map(|&w| {
            let p = rng.random_range(0..w);
            let mut all: Vec<usize> = (0..w).collect();
            for i in 0..p {
                let j = rng.random_range(i..w);
                all.swap(i, j);
            }
            let mut chosen = all[..p].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    PrunedSet { layers }
}

/// Same architecture with every slice owned by a pruned filter set to zero:
/// the filter and its bias, its batch-norm gain and shift, and the matching
/// input slice of the consumer.
pub fn mask<E: Element>(model: &ModelGraph<E>, set: &PrunedSet) -> ModelGraph<E> {
    let mut m = model.clone();
    let shapes = m.arch().shapes().expect("shapes");
    let convs = m.arch().conv_indices();
    let n_layers = m.arch().layers.len();
    for (&li, drop) in convs.iter().zip(&set.layers) {
        for &j in drop {
            if let LayerParams::Conv { weight, bias } = m.layer_params_mut(li) {
                let per = weight.len() / weight.shape()[0];
                weight.data_mut()[j * per..(j + 1) * per].fill(E::zero());
                bias.data_mut()[j] = E::zero();
            }
            let mut block = 1;
            for k in li + 1..n_layers {
                let spec = m.arch().layers[k];
                match (spec, m.layer_params_mut(k)) {
                    (LayerSpec::BatchNorm2d { .. }, LayerParams::BatchNorm { gain, shift, .. }) => {
                        gain.data_mut()[j] = E::zero();
                        shift.data_mut()[j] = E::zero();
                    }
                    (LayerSpec::Flatten, _) => {
                        let (w, h, _) = shapes[k].input.whc();
                        block = w * h;
                    }
                    (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, .. }) => {
                        let s = weight.shape().to_vec();
                        let plane = s[2] * s[3];
                        for o in 0..s[0] {
                            let at = (o * s[1] + j) * plane;
                            weight.data_mut()[at..at + plane].fill(E::zero());
                        }
                        break;
                    }
                    (LayerSpec::Linear { .. }, LayerParams::Linear { weight, .. }) => {
                        let cols = weight.shape()[1];
                        for o in 0..weight.shape()[0] {
                            let at = o * cols + j * block;
                            weight.data_mut()[at..at + block].fill(E::zero());
                        }
                        break;
                    }
                    _ => {}
                }
            }
        }
    }
    m
}
