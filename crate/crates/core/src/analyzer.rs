//! Static cost model: FLOPS, parameters, model size and run-time memory.
//!
//! One multiply-accumulate counts as one FLOP. Only conv and linear layers
//! cost FLOPS; biases are excluded from FLOPS but included in parameters.
//! Every stored value is 4 bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, FeatureShape, LayerSpec};

pub const BYTES_PER_VALUE: u64 = 4;

fn positive(args: &[(&str, usize)]) -> Result<u64> {
    let mut prod: u64 = 1;
    for &(name, v) in args {
        if v == 0 {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        prod = prod
            .checked_mul(v as u64)
            .ok_or_else(|| Error::invalid("FLOPS count overflows u64"))?;
    }
    Ok(prod)
}

/// `c_in * w_k * h_k * w_o * h_o * c_o * batch`.
pub fn flops_conv(c_in: usize, w_k: usize, h_k: usize, w_o: usize, h_o: usize, c_o: usize, batch: usize) -> Result<u64> {
    positive(&[
        ("c_in", c_in),
        ("w_k", w_k),
        ("h_k", h_k),
        ("w_o", w_o),
        ("h_o", h_o),
        ("c_o", c_o),
        ("batch", batch),
    ])
}

/// `c_in * c_o * batch`.
pub fn flops_fc(c_in: usize, c_o: usize, batch: usize) -> Result<u64> {
    positive(&[("c_in", c_in), ("c_o", c_o), ("batch", batch)])
}

/// `(w, h, c)` of a feature shape; flat vectors are `(1, 1, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Whc {
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl From<FeatureShape> for Whc {
    fn from(s: FeatureShape) -> Self {
        let (w, h, c) = s.whc();
        Whc { w, h, c }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub input: Whc,
    pub output: Whc,
    pub flops: u64,
    pub params: u64,
    pub weight_bytes: u64,
    /// Output feature map bytes at the report's batch size; 0 for layers
    /// that work in place (activation, batch-norm, flatten).
    pub featuremap_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch_size: usize,
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
    pub total_params: u64,
    pub model_size_bytes: u64,
    pub featuremap_bytes: u64,
    /// `model_size_bytes + featuremap_bytes`.
    pub trm_bytes: u64,
}

fn layer_name(spec: &LayerSpec, counters: &mut [usize; 6]) -> String {
    let (slot, stem) = match spec {
        LayerSpec::Conv2d { .. } => (0, "conv"),
        LayerSpec::MaxPool2d { .. } => (1, "pool"),
        LayerSpec::ReLU => (2, "relu"),
        LayerSpec::Flatten => (3, "flatten"),
        LayerSpec::Linear { .. } => (4, "fc"),
        LayerSpec::BatchNorm2d { .. } => (5, "bn"),
    };
    counters[slot] += 1;
    format!("{stem}{}", counters[slot])
}

/// Per-layer and total costs of `arch` at batch size `batch`.
pub fn memory_report(arch: &Architecture, batch: usize) -> Result<CostReport> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let shapes = arch.shapes()?;
    let mut counters = [0; 6];
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, (spec, sh)) in arch.layers.iter().zip(&shapes).enumerate() {
        let (input, output) = (Whc::from(sh.input), Whc::from(sh.output));
        let (flops, params, map) = match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel: (kh, kw),
                ..
            } => (
                flops_conv(input.c, kw, kh, output.w, output.h, out_channels, batch)?,
                (input.c * kh * kw * out_channels + out_channels) as u64,
                true,
            ),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (
                flops_fc(in_features, out_features, batch)?,
                (in_features * out_features + out_features) as u64,
                true,
            ),
            LayerSpec::BatchNorm2d { channels, .. } => (0, 2 * channels as u64, false),
            LayerSpec::MaxPool2d { .. } => (0, 0, true),
            LayerSpec::ReLU | LayerSpec::Flatten => (0, 0, false),
        };
        let featuremap_bytes = if map {
            BYTES_PER_VALUE * sh.output.numel() as u64 * batch as u64
        } else {
            0
        };
        layers.push(LayerCost {
            index: i,
            name: layer_name(spec, &mut counters),
            kind: spec.kind().to_string(),
            input,
            output,
            flops,
            params,
            weight_bytes: BYTES_PER_VALUE * params,
            featuremap_bytes,
        });
    }
    let total_flops = layers.iter().map(|l| l.flops).sum();
    let total_params: u64 = layers.iter().map(|l| l.params).sum();
    let featuremap_bytes: u64 = layers.iter().map(|l| l.featuremap_bytes).sum();
    let model_size_bytes = BYTES_PER_VALUE * total_params;
    Ok(CostReport {
        batch_size: batch,
        layers,
        total_flops,
        total_params,
        model_size_bytes,
        featuremap_bytes,
        trm_bytes: model_size_bytes + featuremap_bytes,
    })
}

pub fn flops_total(arch: &Architecture, batch: usize) -> Result<u64> {
    Ok(memory_report(arch, batch)?.total_flops)
}

/// Weights, biases and batch-norm gain/shift.
pub fn param_count(arch: &Architecture) -> Result<u64> {
    Ok(memory_report(arch, 1)?.total_params)
}

pub fn model_size(arch: &Architecture) -> Result<u64> {
    Ok(BYTES_PER_VALUE * param_count(arch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub batch_size: usize,
    /// `before / after`.
    pub flops_ratio: f64,
    pub flops_pruned_pct: f64,
    pub params_ratio: f64,
    pub params_pruned_pct: f64,
    pub trm_ratio: f64,
    pub trm_pruned_pct: f64,
}

pub fn compression_summary(before: &CostReport, after: &CostReport) -> Result<CompressionSummary> {
    if before.batch_size != after.batch_size {
        return Err(Error::invalid(format!(
            "reports use batch sizes {} and {}",
            before.batch_size, after.batch_size
        )));
    }
    let ratio = |b: u64, a: u64| -> Result<(f64, f64)> {
        if a == 0 || b == 0 {
            return Err(Error::invalid("cost report with a zero total"));
        }
        Ok((b as f64 / a as f64, 100.0 * (1.0 - a as f64 / b as f64)))
    };
    let (flops_ratio, flops_pruned_pct) = ratio(before.total_flops, after.total_flops)?;
    let (params_ratio, params_pruned_pct) = ratio(before.total_params, after.total_params)?;
    let (trm_ratio, trm_pruned_pct) = ratio(before.trm_bytes, after.trm_bytes)?;
    Ok(CompressionSummary {
        batch_size: before.batch_size,
        flops_ratio,
        flops_pruned_pct,
        params_ratio,
        params_pruned_pct,
        trm_ratio,
        trm_pruned_pct,
    })
}

fn si(v: u64) -> String {
    match v {
        v if v >= 1_000_000_000 => format!("{:.2}G", v as f64 / 1e9),
        v if v >= 1_000_000 => format!("{:.2}M", v as f64 / 1e6),
        v if v >= 1_000 => format!("{:.1}K", v as f64 / 1e3),
        v => v.to_string(),
    }
}

/// Fixed-width table for terminals.
pub fn render_table(r: &CostReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<12} {:>14} {:>14} {:>12} {:>10} {:>12}",
        "layer", "kind", "input whc", "output whc", "flops", "params", "fmap bytes"
    );
    for l in &r.layers {
        let whc = |x: Whc| format!("{}x{}x{}", x.w, x.h, x.c);
        let _ = writeln!(
            s,
            "{:<10} {:<12} {:>14} {:>14} {:>12} {:>10} {:>12}",
            l.name,
            l.kind,
            whc(l.input),
            whc(l.output),
            si(l.flops),
            si(l.params),
            si(l.featuremap_bytes)
        );
    }
    let _ = writeln!(
        s,
        "total (B={}): flops {} ({}), params {} ({}), model {} bytes, feature maps {} bytes, TRM {} bytes",
        r.batch_size,
        r.total_flops,
        si(r.total_flops),
        r.total_params,
        si(r.total_params),
        r.model_size_bytes,
        r.featuremap_bytes,
        r.trm_bytes
    );
    s
}
