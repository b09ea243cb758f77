use sha2::{Digest, Sha256};

use super::arch::{Architecture, FeatureShape, LayerShapes, LayerSpec};
use super::kernels::{self, ConvGeom, PoolGeom};
use super::loss::{cross_entropy, cross_entropy_with_grad, AuxForm, AuxLoss};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Distribution, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and updates its running estimates.
    Train,
    /// Batch-norm uses its running estimates.
    Eval,
}

/// Parameter tensors owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<E: Element = f32> {
    None,
    /// `weight: [n, c_in, kh, kw]`, `bias: [n]`.
    Conv { weight: Tensor<E>, bias: Tensor<E> },
    /// `weight: [out, in]`, `bias: [out]`.
    Linear { weight: Tensor<E>, bias: Tensor<E> },
    BatchNorm {
        gain: Tensor<E>,
        shift: Tensor<E>,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
    },
}

impl<E: Element> LayerParams<E> {
    /// `(name, tensor)` pairs in storage order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<E>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerParams::BatchNorm {
                gain,
                shift,
                running_mean,
                running_var,
            } => vec![
                ("gain", gain),
                ("shift", shift),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerParams::BatchNorm {
                gain,
                shift,
                running_mean,
                running_var,
            } => vec![
                ("gain", gain),
                ("shift", shift),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }

    /// Tensors updated by the optimizer, in the same order as [`LayerGrads::tensors`].
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<E>> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                vec![weight, bias]
            }
            LayerParams::BatchNorm { gain, shift, .. } => vec![gain, shift],
        }
    }
}

/// Expected parameter shapes for `spec` given its input shape.
pub(crate) fn expected_param_shapes(spec: &LayerSpec, shapes: &LayerShapes) -> Vec<(&'static str, Vec<usize>)> {
    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel: (kh, kw),
            ..
        } => vec![
            ("weight", vec![out_channels, shapes.input.channels(), kh, kw]),
            ("bias", vec![out_channels]),
        ],
        LayerSpec::Linear {
            in_features,
            out_features,
        } => vec![
            ("weight", vec![out_features, in_features]),
            ("bias", vec![out_features]),
        ],
        LayerSpec::BatchNorm2d { channels, .. } => ["gain", "shift", "running_mean", "running_var"]
            .into_iter()
            .map(|n| (n, vec![channels]))
            .collect(),
        _ => vec![],
    }
}

/// Gradient tensors for one layer; shape-congruent with the trainable params.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads<E: Element = f32> {
    None,
    Conv { weight: Tensor<E>, bias: Tensor<E> },
    Linear { weight: Tensor<E>, bias: Tensor<E> },
    BatchNorm { gain: Tensor<E>, shift: Tensor<E> },
}

impl<E: Element> LayerGrads<E> {
    pub fn tensors(&self) -> Vec<&Tensor<E>> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Conv { weight, bias } | LayerGrads::Linear { weight, bias } => {
                vec![weight, bias]
            }
            LayerGrads::BatchNorm { gain, shift } => vec![gain, shift],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<E: Element = f32> {
    pub layers: Vec<LayerGrads<E>>,
    /// Cross-entropy of the batch the gradients were computed on.
    pub data_loss: f64,
    /// Auxiliary penalty (unscaled) at the current weights; 0 when lambda = 0.
    pub aux_loss: f64,
}

impl<E: Element> Gradients<E> {
    pub fn tensors(&self) -> Vec<&Tensor<E>> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }
}

#[derive(Debug, Clone)]
enum LayerCache<E> {
    None,
    Conv { cols: Vec<E>, geom: ConvGeom },
    Pool { argmax: Vec<u32>, in_len: usize },
    BatchNorm { xhat: Vec<E>, inv_std: Vec<E> },
}

/// Everything a training-mode forward pass leaves behind for `backward`.
#[derive(Debug, Clone)]
pub struct BatchActivations<E: Element = f32> {
    /// Output of every layer, `[B, ...]`; the last one holds the logits.
    pub outputs: Vec<Tensor<E>>,
    input: Tensor<E>,
    caches: Vec<LayerCache<E>>,
    arch: Architecture,
    mode: Mode,
}

impl<E: Element> BatchActivations<E> {
    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn logits(&self) -> &Tensor<E> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

struct BnUpdate<E> {
    layer: usize,
    mean: Vec<E>,
    var: Vec<E>,
    count: usize,
}

struct Run<E: Element> {
    logits: Tensor<E>,
    outputs: Vec<Tensor<E>>,
    caches: Vec<LayerCache<E>>,
    bn_updates: Vec<BnUpdate<E>>,
}

fn batched_shape(batch: usize, s: FeatureShape) -> Vec<usize> {
    match s {
        FeatureShape::Map { c, h, w } => vec![batch, c, h, w],
        FeatureShape::Flat(n) => vec![batch, n],
    }
}

fn derive_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finalizer over (seed, layer)
    let mut z = seed.wrapping_add((layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An ordered CNN: architecture plus one [`LayerParams`] per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<E: Element = f32> {
    arch: Architecture,
    params: Vec<LayerParams<E>>,
}

impl<E: Element> ModelGraph<E> {
    /// Builds a model from explicit parameters, checking every shape.
    pub fn new(arch: Architecture, params: Vec<LayerParams<E>>) -> Result<Self> {
        let m = ModelGraph { arch, params };
        m.validate()?;
        Ok(m)
    }

    /// Fresh model: conv/linear weights uniform in `±sqrt(6 / fan_in)`, zero
    /// biases, batch-norm gain 1 and shift 0.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut params = Vec::with_capacity(arch.layers.len());
        for (i, (spec, sh)) in arch.layers.iter().zip(&shapes).enumerate() {
            let expected = expected_param_shapes(spec, sh);
            let p = match spec {
                LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                    let wshape = expected[0].1.clone();
                    let fan_in: usize = wshape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let weight = Tensor::rng_fill(
                        wshape,
                        derive_seed(seed, i),
                        Distribution::Uniform {
                            low: -bound,
                            high: bound,
                        },
                    )?;
                    let bias = Tensor::zeros(expected[1].1.clone())?;
                    if matches!(spec, LayerSpec::Conv2d { .. }) {
                        LayerParams::Conv { weight, bias }
                    } else {
                        LayerParams::Linear { weight, bias }
                    }
                }
                LayerSpec::BatchNorm2d { channels, .. } => LayerParams::BatchNorm {
                    gain: Tensor::ones([*channels])?,
                    shift: Tensor::zeros([*channels])?,
                    running_mean: Tensor::zeros([*channels])?,
                    running_var: Tensor::ones([*channels])?,
                },
                _ => LayerParams::None,
            };
            params.push(p);
        }
        ModelGraph::new(arch, params)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.shapes()?;
        if self.params.len() != self.arch.layers.len() {
            return Err(Error::Architecture(format!(
                "{} parameter groups for {} layers",
                self.params.len(),
                self.arch.layers.len()
            )));
        }
        let mut seen_linear = false;
        for (i, ((spec, sh), p)) in self.arch.layers.iter().zip(&shapes).zip(&self.params).enumerate() {
            let kind_ok = matches!(
                (spec, p),
                (LayerSpec::Conv2d { .. }, LayerParams::Conv { .. })
                    | (LayerSpec::Linear { .. }, LayerParams::Linear { .. })
                    | (LayerSpec::BatchNorm2d { .. }, LayerParams::BatchNorm { .. })
                    | (LayerSpec::ReLU | LayerSpec::Flatten | LayerSpec::MaxPool2d { .. }, LayerParams::None)
            );
            if !kind_ok {
                return Err(Error::Layer {
                    layer: i,
                    kind: spec.kind(),
                    msg: "parameter group does not match layer kind".into(),
                });
            }
            for ((name, want), (pname, t)) in expected_param_shapes(spec, sh).iter().zip(p.named()) {
                debug_assert_eq!(*name, pname);
                if t.shape() != want.as_slice() {
                    return Err(Error::Layer {
                        layer: i,
                        kind: spec.kind(),
                        msg: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                    });
                }
            }
            if matches!(spec, LayerSpec::Linear { .. }) {
                seen_linear = true;
            } else if seen_linear && matches!(spec, LayerSpec::Conv2d { .. }) {
                return Err(Error::Layer {
                    layer: i,
                    kind: spec.kind(),
                    msg: "conv layer after a linear layer".into(),
                });
            }
        }
        self.arch.num_classes()?;
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[LayerParams<E>] {
        &self.params
    }

    /// Mutable access to one layer's parameters. Replacing a tensor with one of
    /// a different shape breaks the model; call [`ModelGraph::validate`] afterwards.
    pub fn layer_params_mut(&mut self, layer: usize) -> &mut LayerParams<E> {
        &mut self.params[layer]
    }

    pub fn into_parts(self) -> (Architecture, Vec<LayerParams<E>>) {
        (self.arch, self.params)
    }

    /// `("{layer}.{name}", tensor)` for every stored tensor, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        self.params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.named().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        self.params
            .iter_mut()
            .enumerate()
            .flat_map(|(i, p)| p.named_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    /// Optimizer-visible tensors in the order of [`Gradients::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<E>> {
        self.params.iter_mut().flat_map(|p| p.trainable_mut()).collect()
    }

    /// Total number of scalars across every stored tensor.
    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.arch.conv_widths()
    }

    /// Weights of filter `j` of the conv layer at graph index `layer`.
    pub fn conv_filter(&self, layer: usize, j: usize) -> Result<&[E]> {
        match self.params.get(layer) {
            Some(LayerParams::Conv { weight, .. }) => {
                let per = weight.len() / weight.shape()[0];
                if j >= weight.shape()[0] {
                    return Err(Error::invalid(format!(
                        "filter {j} out of range for layer {layer} with {} filters",
                        weight.shape()[0]
                    )));
                }
                Ok(&weight.data()[j * per..(j + 1) * per])
            }
            _ => Err(Error::invalid(format!("layer {layer} is not a conv layer"))),
        }
    }

    pub fn cast<F: Element>(&self) -> ModelGraph<F> {
        let params = self
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { weight, bias } => LayerParams::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                LayerParams::Linear { weight, bias } => LayerParams::Linear {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                LayerParams::BatchNorm {
                    gain,
                    shift,
                    running_mean,
                    running_var,
                } => LayerParams::BatchNorm {
                    gain: gain.cast(),
                    shift: shift.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
            })
            .collect();
        ModelGraph {
            arch: self.arch.clone(),
            params,
        }
    }

    /// SHA-256 over architecture text and every tensor's bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.to_string().as_bytes());
        let mut buf = Vec::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<usize> {
        let [c, h, w] = self.arch.input;
        match *x.shape() {
            [b, xc, xh, xw] if b >= 1 && (xc, xh, xw) == (c, h, w) => Ok(b),
            _ => Err(Error::Layer {
                layer: 0,
                kind: self.arch.layers.first().map(|l| l.kind()).unwrap_or("input"),
                msg: format!("input batch {:?} does not match model input [B, {c}, {h}, {w}]", x.shape()),
            }),
        }
    }

    fn run(&self, x: &Tensor<E>, mode: Mode, record: bool) -> Result<Run<E>> {
        let batch = self.check_input(x)?;
        let shapes = self.arch.shapes()?;
        let mut cur: Vec<E> = x.data().to_vec();
        let mut outputs = Vec::new();
        let mut caches = Vec::new();
        let mut bn_updates = Vec::new();
        for (i, ((spec, sh), p)) in self.arch.layers.iter().zip(&shapes).zip(&self.params).enumerate() {
            let (next, cache) = match (spec, p) {
                (
                    &LayerSpec::Conv2d {
                        out_channels,
                        kernel: (kh, kw),
                        stride,
                        padding,
                    },
                    LayerParams::Conv { weight, bias },
                ) => {
                    let FeatureShape::Map { c, h, w } = sh.input else { unreachable!() };
                    let FeatureShape::Map { h: oh, w: ow, .. } = sh.output else { unreachable!() };
                    let geom = ConvGeom {
                        batch,
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: out_channels,
                        kh,
                        kw,
                        stride,
                        pad: padding,
                        out_h: oh,
                        out_w: ow,
                    };
                    let (y, cols) = kernels::conv_forward(&geom, &cur, weight.data(), bias.data(), record);
                    (y, LayerCache::Conv { cols, geom })
                }
                (&LayerSpec::MaxPool2d { window, stride }, _) => {
                    let FeatureShape::Map { c, h, w } = sh.input else { unreachable!() };
                    let FeatureShape::Map { h: oh, w: ow, .. } = sh.output else { unreachable!() };
                    let geom = PoolGeom {
                        planes: batch * c,
                        in_h: h,
                        in_w: w,
                        window,
                        stride,
                        out_h: oh,
                        out_w: ow,
                    };
                    let (y, argmax) = kernels::maxpool_forward(&geom, &cur);
                    (
                        y,
                        LayerCache::Pool {
                            argmax,
                            in_len: cur.len(),
                        },
                    )
                }
                (LayerSpec::ReLU, _) => {
                    let mut y = cur;
                    y.iter_mut().for_each(|v| {
                        if *v < E::zero() {
                            *v = E::zero()
                        }
                    });
                    (y, LayerCache::None)
                }
                (LayerSpec::Flatten, _) => (cur, LayerCache::None),
                (
                    &LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    LayerParams::Linear { weight, bias },
                ) => (
                    kernels::linear_forward(&cur, batch, in_features, out_features, weight.data(), bias.data()),
                    LayerCache::None,
                ),
                (
                    &LayerSpec::BatchNorm2d { channels, eps, .. },
                    LayerParams::BatchNorm {
                        gain,
                        shift,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let spatial = sh.input.numel() / channels;
                    let stats = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((running_mean.data(), running_var.data())),
                    };
                    let f = kernels::batchnorm_forward(
                        &cur,
                        batch,
                        channels,
                        spatial,
                        gain.data(),
                        shift.data(),
                        E::from_f64(eps),
                        stats,
                    );
                    if mode == Mode::Train {
                        bn_updates.push(BnUpdate {
                            layer: i,
                            mean: f.mean,
                            var: f.var,
                            count: batch * spatial,
                        });
                    }
                    (
                        f.out,
                        LayerCache::BatchNorm {
                            xhat: f.xhat,
                            inv_std: f.inv_std,
                        },
                    )
                }
                _ => unreachable!("validated parameter kinds"),
            };
            if record {
                outputs.push(Tensor::from_vec(batched_shape(batch, sh.output), next.clone())?);
                caches.push(cache);
            }
            cur = next;
        }
        let out_shape = batched_shape(batch, self.arch.output_shape()?);
        Ok(Run {
            logits: Tensor::from_vec(out_shape, cur)?,
            outputs,
            caches,
            bn_updates,
        })
    }

    fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<E>>) {
        for u in updates {
            let LayerSpec::BatchNorm2d { momentum, .. } = self.arch.layers[u.layer] else {
                unreachable!()
            };
            let LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut self.params[u.layer]
            else {
                unreachable!()
            };
            let m = E::from_f64(momentum);
            let keep = E::one() - m;
            let unbias = if u.count > 1 {
                E::from_f64(u.count as f64 / (u.count - 1) as f64)
            } else {
                E::one()
            };
            for (r, &v) in running_mean.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in running_var.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }

    /// Forward pass returning logits and the activations needed by [`ModelGraph::backward`].
    /// In train mode, batch-norm running statistics are updated.
    pub fn forward(&mut self, batch: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, BatchActivations<E>)> {
        let run = self.run(batch, mode, true)?;
        if mode == Mode::Train {
            self.apply_bn_updates(run.bn_updates);
        }
        let acts = BatchActivations {
            outputs: run.outputs,
            input: batch.clone(),
            caches: run.caches,
            arch: self.arch.clone(),
            mode,
        };
        Ok((run.logits, acts))
    }

    /// Eval-mode logits without recording activations.
    pub fn logits(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.run(batch, Mode::Eval, false)?.logits)
    }

    pub fn predict(&self, batch: &Tensor<E>) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                // first maximum wins
                row.iter()
                    .enumerate()
                    .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }

    /// Eval-mode predictions for a whole dataset.
    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<usize>> {
        const CHUNK: usize = 500;
        let mut preds = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            preds.extend(self.predict(&data.batch::<E>(&idx)?)?);
        }
        Ok(preds)
    }

    /// Fraction of samples whose argmax logit equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("accuracy of an empty dataset"));
        }
        let preds = self.predict_dataset(data)?;
        let hits = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Auxiliary penalty over conv filter weights only.
    pub fn auxiliary_loss(&self, form: AuxForm) -> Result<AuxLoss> {
        let per_layer: Vec<f64> = self
            .params
            .iter()
            .filter_map(|p| match p {
                LayerParams::Conv { weight, .. } => Some(form.penalty_sum(weight.data())),
                _ => None,
            })
            .collect();
        if per_layer.is_empty() {
            return Err(Error::invalid("auxiliary loss needs at least one conv layer"));
        }
        Ok(AuxLoss {
            total: per_layer.iter().sum(),
            per_layer,
        })
    }

    /// `cross_entropy + lambda * aux_total`, without touching running statistics.
    pub fn total_loss(
        &self,
        batch: &Tensor<E>,
        labels: &[usize],
        lambda: f64,
        form: AuxForm,
        mode: Mode,
    ) -> Result<f64> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let logits = self.run(batch, mode, false)?.logits;
        let data = cross_entropy(&logits, labels)?;
        if lambda == 0.0 {
            return Ok(data);
        }
        Ok(data + lambda * self.auxiliary_loss(form)?.total)
    }

    /// Gradients of `cross_entropy + lambda * aux` with respect to every trainable tensor.
    pub fn backward(
        &self,
        acts: &BatchActivations<E>,
        labels: &[usize],
        lambda: f64,
        form: AuxForm,
    ) -> Result<Gradients<E>> {
        if acts.mode != Mode::Train {
            return Err(Error::invalid("backward needs activations from a train-mode forward"));
        }
        if acts.arch != self.arch || acts.caches.len() != self.arch.layers.len() {
            return Err(Error::invalid("activations were produced by a different model"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let batch = acts.batch_size();
        let (data_loss, mut grad) = cross_entropy_with_grad(acts.logits(), labels)?;
        let mut layers = vec![LayerGrads::None; self.arch.layers.len()];
        let mut aux_loss = 0.0;

        for i in (0..self.arch.layers.len()).rev() {
            let spec = &self.arch.layers[i];
            let input = if i == 0 { &acts.input } else { &acts.outputs[i - 1] };
            match (spec, &self.params[i], &acts.caches[i]) {
                (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, bias }, LayerCache::Conv { cols, geom }) => {
                    let (dx, mut dw, db) = kernels::conv_backward(geom, cols, weight.data(), &grad);
                    if lambda > 0.0 {
                        let l = lambda;
                        for (d, w) in dw.iter_mut().zip(weight.data()) {
                            *d += E::from_f64(l * form.subgradient(w.as_f64()));
                        }
                        aux_loss += form.penalty_sum(weight.data());
                    }
                    layers[i] = LayerGrads::Conv {
                        weight: Tensor::from_vec(weight.shape().to_vec(), dw)?,
                        bias: Tensor::from_vec(bias.shape().to_vec(), db)?,
                    };
                    grad = dx;
                }
                (LayerSpec::MaxPool2d { .. }, _, LayerCache::Pool { argmax, in_len }) => {
                    grad = kernels::maxpool_backward(*in_len, argmax, &grad);
                }
                (LayerSpec::ReLU, _, _) => {
                    for (g, &y) in grad.iter_mut().zip(acts.outputs[i].data()) {
                        if y <= E::zero() {
                            *g = E::zero();
                        }
                    }
                }
                (LayerSpec::Flatten, _, _) => {}
                (
                    &LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    LayerParams::Linear { weight, bias },
                    _,
                ) => {
                    let (dx, dw, db) =
                        kernels::linear_backward(input.data(), batch, in_features, out_features, weight.data(), &grad);
                    layers[i] = LayerGrads::Linear {
                        weight: Tensor::from_vec(weight.shape().to_vec(), dw)?,
                        bias: Tensor::from_vec(bias.shape().to_vec(), db)?,
                    };
                    grad = dx;
                }
                (
                    &LayerSpec::BatchNorm2d { channels, .. },
                    LayerParams::BatchNorm { gain, shift, .. },
                    LayerCache::BatchNorm { xhat, inv_std },
                ) => {
                    let spatial = input.len() / (batch * channels);
                    let (dx, dg, ds) =
                        kernels::batchnorm_backward(xhat, inv_std, gain.data(), &grad, batch, channels, spatial);
                    layers[i] = LayerGrads::BatchNorm {
                        gain: Tensor::from_vec(gain.shape().to_vec(), dg)?,
                        shift: Tensor::from_vec(shift.shape().to_vec(), ds)?,
                    };
                    grad = dx;
                }
                _ => return Err(Error::invalid(format!("missing activation cache for layer {i}"))),
            }
        }
        Ok(Gradients {
            layers,
            data_loss,
            aux_loss,
        })
    }
}
