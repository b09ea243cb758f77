//! Layer specifications, shape inference and the plain-text architecture format.
//!
//! The text format has one layer per line:
//!
//! ```text
//! input c=1 h=28 w=28
//! conv out=20 k=5 stride=1 pad=0
//! relu
//! pool k=2 stride=2
//! flatten
//! linear out=500
//! ```
//!
//! `bn` lines take optional `eps=` and `momentum=`; `linear` may carry `in=`
//! which is then checked against the inferred width. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    ReLU,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::MaxPool2d { .. } => "pool",
            LayerSpec::ReLU => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::BatchNorm2d { .. } => "bn",
        }
    }

    pub fn conv(out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: (k, k),
            stride,
            padding,
        }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2d { window, stride }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::BatchNorm2d {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Output shape for one sample, or a message describing why the input is rejected.
    pub fn output_shape(&self, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
        use FeatureShape::*;
        match (*self, input) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel: (kh, kw),
                    stride,
                    padding,
                },
                Map { h, w, .. },
            ) => {
                if out_channels == 0 || kh == 0 || kw == 0 || stride == 0 {
                    return Err("out_channels, kernel and stride must be >= 1".into());
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kh || pw < kw {
                    return Err(format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
                }
                Ok(Map {
                    c: out_channels,
                    h: (ph - kh) / stride + 1,
                    w: (pw - kw) / stride + 1,
                })
            }
            (LayerSpec::MaxPool2d { window, stride }, Map { c, h, w }) => {
                if window == 0 || stride == 0 {
                    return Err("window and stride must be >= 1".into());
                }
                if h < window || w < window {
                    return Err(format!("window {window} larger than input {h}x{w}"));
                }
                Ok(Map {
                    c,
                    h: (h - window) / stride + 1,
                    w: (w - window) / stride + 1,
                })
            }
            (LayerSpec::BatchNorm2d { channels, .. }, Map { c, .. }) => {
                if channels != c {
                    Err(format!("expects {channels} channels, input has {c}"))
                } else {
                    Ok(input)
                }
            }
            (LayerSpec::ReLU, s) => Ok(s),
            (LayerSpec::Flatten, Map { c, h, w }) => Ok(Flat(c * h * w)),
            (LayerSpec::Flatten, Flat(n)) => Ok(Flat(n)),
            (
                LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                Flat(n),
            ) => {
                if in_features != n {
                    Err(format!("expects {in_features} input features, got {n}"))
                } else if out_features == 0 {
                    Err("out_features must be >= 1".into())
                } else {
                    Ok(Flat(out_features))
                }
            }
            (LayerSpec::Linear { .. }, Map { .. }) => {
                Err("linear layer needs a flatten layer before it".into())
            }
            (_, Flat(_)) => Err("spatial layer applied to a flattened input".into()),
        }
    }
}

/// Per-sample feature shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(self) -> usize {
        match self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }

    /// `(w, h, c)` with flat vectors reported as `(1, 1, n)`.
    pub fn whc(self) -> (usize, usize, usize) {
        match self {
            FeatureShape::Map { c, h, w } => (w, h, c),
            FeatureShape::Flat(n) => (1, 1, n),
        }
    }

    pub fn channels(self) -> usize {
        self.whc().2
    }
}

/// Input shape plus ordered layer list; no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: FeatureShape,
    pub output: FeatureShape,
}

impl Architecture {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture { input, layers };
        arch.shapes()?;
        Ok(arch)
    }

    pub fn input_shape(&self) -> FeatureShape {
        let [c, h, w] = self.input;
        FeatureShape::Map { c, h, w }
    }

    /// Propagates shapes from the input through every layer.
    pub fn shapes(&self) -> Result<Vec<LayerShapes>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Architecture(format!(
                "input dimensions must be >= 1, got {:?}",
                self.input
            )));
        }
        let mut cur = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(cur).map_err(|msg| Error::Layer {
                layer: i,
                kind: layer.kind(),
                msg,
            })?;
            out.push(LayerShapes {
                input: cur,
                output: next,
            });
            cur = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(self
            .shapes()?
            .last()
            .map(|s| s.output)
            .unwrap_or(self.input_shape()))
    }

    /// Number of output classes; the network must end in a flat vector.
    pub fn num_classes(&self) -> Result<usize> {
        match self.output_shape()? {
            FeatureShape::Flat(n) => Ok(n),
            s => Err(Error::Architecture(format!(
                "network output must be flat, got {s:?}"
            ))),
        }
    }

    /// Graph indices of the Conv2d layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }

    /// Same layer stack with new conv widths. Batch-norm channels and linear
    /// input sizes are recomputed from the propagated shapes.
    pub fn with_conv_widths(&self, widths: &[usize]) -> Result<Architecture> {
        let n = self.conv_indices().len();
        if widths.len() != n {
            return Err(Error::Architecture(format!("{} widths for {n} conv layers", widths.len())));
        }
        let mut layers = self.layers.clone();
        let mut next = widths.iter();
        let mut cur = self.input_shape();
        for (i, layer) in layers.iter_mut().enumerate() {
            match layer {
                LayerSpec::Conv2d { out_channels, .. } => *out_channels = *next.next().expect("counted"),
                LayerSpec::BatchNorm2d { channels, .. } => *channels = cur.channels(),
                LayerSpec::Linear { in_features, .. } => *in_features = cur.numel(),
                _ => {}
            }
            cur = layer.output_shape(cur).map_err(|msg| Error::Layer {
                layer: i,
                kind: layer.kind(),
                msg,
            })?;
        }
        Architecture::new(self.input, layers)
    }

    /// Parses the line-oriented text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        // Channel/feature count tracked while parsing so `bn` and `linear`
        // lines can omit what is implied by the preceding layers.
        let mut cur: Option<FeatureShape> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Architecture(format!("line {}: {msg}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().unwrap();
            let mut kv = BTreeMap::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
                kv.insert(k, v);
            }
            let mut take = |key: &str| kv.remove(key);
            let uint = |v: Option<&str>, key: &str| -> Result<Option<usize>> {
                v.map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| bad(format!("{key}: expected a non-negative integer, got `{s}`")))
                })
                .transpose()
            };
            let float = |v: Option<&str>, key: &str| -> Result<Option<f64>> {
                v.map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("{key}: expected a number, got `{s}`")))
                })
                .transpose()
            };

            if keyword == "input" {
                if input.is_some() || !layers.is_empty() {
                    return Err(bad("`input` must be the first line and appear once".into()));
                }
                let c = uint(take("c"), "c")?.ok_or_else(|| bad("input needs c=".into()))?;
                let h = uint(take("h"), "h")?.ok_or_else(|| bad("input needs h=".into()))?;
                let w = uint(take("w"), "w")?.ok_or_else(|| bad("input needs w=".into()))?;
                input = Some([c, h, w]);
                cur = Some(FeatureShape::Map { c, h, w });
            } else {
                let Some(shape) = cur else {
                    return Err(bad("architecture must start with an `input` line".into()));
                };
                let layer = match keyword {
                    "conv" => {
                        let out = uint(take("out"), "out")?
                            .ok_or_else(|| bad("conv needs out=".into()))?;
                        let k = take("k").ok_or_else(|| bad("conv needs k=".into()))?;
                        let kernel = match k.split_once('x') {
                            Some((a, b)) => (
                                uint(Some(a), "k")?.unwrap(),
                                uint(Some(b), "k")?.unwrap(),
                            ),
                            None => {
                                let k = uint(Some(k), "k")?.unwrap();
                                (k, k)
                            }
                        };
                        LayerSpec::Conv2d {
                            out_channels: out,
                            kernel,
                            stride: uint(take("stride"), "stride")?.unwrap_or(1),
                            padding: uint(take("pad"), "pad")?.unwrap_or(0),
                        }
                    }
                    "pool" => {
                        let window = uint(take("k"), "k")?.ok_or_else(|| bad("pool needs k=".into()))?;
                        LayerSpec::MaxPool2d {
                            window,
                            stride: uint(take("stride"), "stride")?.unwrap_or(window),
                        }
                    }
                    "relu" => LayerSpec::ReLU,
                    "flatten" => LayerSpec::Flatten,
                    "bn" => LayerSpec::BatchNorm2d {
                        channels: uint(take("c"), "c")?.unwrap_or(shape.channels()),
                        eps: float(take("eps"), "eps")?.unwrap_or(BN_EPS),
                        momentum: float(take("momentum"), "momentum")?.unwrap_or(BN_MOMENTUM),
                    },
                    "linear" => {
                        let out = uint(take("out"), "out")?
                            .ok_or_else(|| bad("linear needs out=".into()))?;
                        let inferred = match shape {
                            FeatureShape::Flat(n) => n,
                            FeatureShape::Map { .. } => {
                                return Err(bad("linear layer needs a flatten layer before it".into()))
                            }
                        };
                        let declared = uint(take("in"), "in")?.unwrap_or(inferred);
                        LayerSpec::Linear {
                            in_features: declared,
                            out_features: out,
                        }
                    }
                    other => return Err(bad(format!("unknown layer kind `{other}`"))),
                };
                cur = Some(
                    layer
                        .output_shape(shape)
                        .map_err(|m| bad(format!("{keyword}: {m}")))?,
                );
                layers.push(layer);
            }
            if let Some(k) = kv.keys().next() {
                return Err(bad(format!("unknown key `{k}` for `{keyword}`")));
            }
        }
        let input = input.ok_or_else(|| Error::Architecture("missing `input` line".into()))?;
        Architecture::new(input, layers)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        writeln!(f, "input c={c} h={h} w={w}")?;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel: (kh, kw),
                    stride,
                    padding,
                } => {
                    if kh == kw {
                        writeln!(f, "conv out={out_channels} k={kh} stride={stride} pad={padding}")?
                    } else {
                        writeln!(f, "conv out={out_channels} k={kh}x{kw} stride={stride} pad={padding}")?
                    }
                }
                LayerSpec::MaxPool2d { window, stride } => {
                    writeln!(f, "pool k={window} stride={stride}")?
                }
                LayerSpec::ReLU => writeln!(f, "relu")?,
                LayerSpec::Flatten => writeln!(f, "flatten")?,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => writeln!(f, "linear in={in_features} out={out_features}")?,
                LayerSpec::BatchNorm2d {
                    channels,
                    eps,
                    momentum,
                } => writeln!(f, "bn c={channels} eps={eps:?} momentum={momentum:?}")?,
            }
        }
        Ok(())
    }
}

/// Built-in named architectures.
pub mod zoo {
    use super::*;

    pub const VGG16_BASELINE: [usize; 13] =
        [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    pub const VGG16_PRUN1: [usize; 13] = [31, 53, 84, 84, 146, 146, 146, 117, 62, 62, 62, 62, 62];
    pub const VGG16_PRUN2: [usize; 13] = [20, 50, 71, 71, 116, 116, 116, 87, 42, 42, 42, 42, 42];

    /// Conv index (0-based) after which a 2x2 max-pool closes a VGG block.
    const VGG_POOL_AFTER: [usize; 5] = [1, 3, 6, 9, 12];

    pub const NAMES: [&str; 4] = ["lenet5", "vgg16_cifar", "vgg16_prun1", "vgg16_prun2"];

    /// LeNet-5 on 28x28 MNIST with conv widths `(c1, c2)`: conv5 -> pool2 ->
    /// conv5 -> pool2 -> flatten -> fc500 -> fc10.
    pub fn lenet5_with(c1: usize, c2: usize) -> Architecture {
        Architecture::new(
            [1, 28, 28],
            vec![
                LayerSpec::conv(c1, 5, 1, 0),
                LayerSpec::ReLU,
                LayerSpec::pool(2, 2),
                LayerSpec::conv(c2, 5, 1, 0),
                LayerSpec::ReLU,
                LayerSpec::pool(2, 2),
                LayerSpec::Flatten,
                LayerSpec::linear(c2 * 16, 500),
                LayerSpec::ReLU,
                LayerSpec::linear(500, 10),
            ],
        )
        .expect("lenet5 shapes compose")
    }

    pub fn lenet5() -> Architecture {
        lenet5_with(20, 50)
    }

    /// VGG-16 for 32x32x3 CIFAR-10: 3x3 same-padded convs each followed by
    /// batch norm and ReLU, five 2x2 pools, then FC 512 and FC 10.
    pub fn vgg16_cifar_with(widths: &[usize; 13]) -> Architecture {
        let mut layers = Vec::new();
        for (i, &n) in widths.iter().enumerate() {
            layers.push(LayerSpec::conv(n, 3, 1, 1));
            layers.push(LayerSpec::bn(n));
            layers.push(LayerSpec::ReLU);
            if VGG_POOL_AFTER.contains(&i) {
                layers.push(LayerSpec::pool(2, 2));
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::linear(widths[12], 512));
        layers.push(LayerSpec::ReLU);
        layers.push(LayerSpec::linear(512, 10));
        Architecture::new([3, 32, 32], layers).expect("vgg16 shapes compose")
    }

    /// CONVx_y names of the 13 VGG-16 conv layers.
    pub fn vgg16_conv_names() -> Vec<String> {
        let blocks = [2, 2, 3, 3, 3];
        blocks
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| (1..=n).map(move |j| format!("CONV{}_{}", b + 1, j)))
            .collect()
    }

    pub fn by_name(name: &str) -> Option<Architecture> {
        match name {
            "lenet5" => Some(lenet5()),
            "vgg16_cifar" => Some(vgg16_cifar_with(&VGG16_BASELINE)),
            "vgg16_prun1" => Some(vgg16_cifar_with(&VGG16_PRUN1)),
            "vgg16_prun2" => Some(vgg16_cifar_with(&VGG16_PRUN2)),
            _ => None,
        }
    }
}
