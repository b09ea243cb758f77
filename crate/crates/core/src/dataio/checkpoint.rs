//! `SFPK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFPK"            4 bytes
//! version           u32
//! arch_len          u32, then arch_len bytes of UTF-8 architecture text
//! tensor records    until end of file:
//!     name_len u32, name bytes, dtype u8, ndim u8, dims u32 * ndim, payload
//! ```
//!
//! The architecture text is the format parsed by [`Architecture::parse`], with
//! one extra `meta epoch=.. seed=.. config_hash=..` line. Tensor records appear
//! in [`ModelGraph::named_tensors`] order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{expected_param_shapes, Architecture, LayerParams, LayerSpec, ModelGraph};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFPK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    /// Hash of the resolved run configuration; `-` when unknown.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E: Element = f32> {
    pub model: ModelGraph<E>,
    pub meta: CheckpointMeta,
}

fn meta_line(meta: &CheckpointMeta) -> String {
    let hash = if meta.config_hash.is_empty() {
        "-"
    } else {
        meta.config_hash.as_str()
    };
    format!("meta epoch={} seed={} config_hash={}\n", meta.epoch, meta.seed, hash)
}

pub fn encode_checkpoint<E: Element>(model: &ModelGraph<E>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = format!("{}{}", model.arch(), meta_line(meta));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in model.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        t.data().iter().for_each(|v| v.write_le(&mut out));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn parse_meta(line: &str) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::default();
    for tok in line.split_whitespace().skip(1) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad meta token `{tok}`")))?;
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Checkpoint(format!("bad meta value `{tok}`")))
        };
        match k {
            "epoch" => meta.epoch = num(v)?,
            "seed" => meta.seed = num(v)?,
            "config_hash" => meta.config_hash = if v == "-" { String::new() } else { v.to_string() },
            _ => return Err(Error::Checkpoint(format!("unknown meta key `{k}`"))),
        }
    }
    Ok(meta)
}

pub fn decode_checkpoint<E: Element>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"SFPK\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32("architecture length")? as usize;
    let text = std::str::from_utf8(r.take(len, "architecture")?)
        .map_err(|e| Error::Checkpoint(format!("architecture is not UTF-8: {e}")))?;
    let mut arch_text = String::new();
    let mut meta = None;
    for line in text.lines() {
        if line.trim_start().starts_with("meta") {
            meta = Some(parse_meta(line)?);
        } else {
            arch_text.push_str(line);
            arch_text.push('\n');
        }
    }
    let arch = Architecture::parse(&arch_text)?;
    let shapes = arch.shapes()?;

    let mut params = Vec::with_capacity(arch.layers.len());
    for (i, (spec, sh)) in arch.layers.iter().zip(&shapes).enumerate() {
        let mut tensors = Vec::new();
        for (pname, want) in expected_param_shapes(spec, sh) {
            let expect_name = format!("{i}.{pname}");
            let nlen = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != expect_name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{expect_name}`, found `{name}`"
                )));
            }
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code} for `{name}`")))?;
            if dtype != E::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "`{name}` stored as {dtype:?}, requested {:?}",
                    E::DTYPE
                )));
            }
            let ndim = r.u8("ndim")? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != want {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {dims:?}, architecture implies {want:?}"
                )));
            }
            let count: usize = dims.iter().product();
            let payload = r.take(count * dtype.size(), "tensor payload")?;
            let data = payload.chunks_exact(dtype.size()).map(E::read_le).collect();
            tensors.push(Tensor::from_vec(dims, data)?);
        }
        let mut it = tensors.into_iter();
        let p = match spec {
            LayerSpec::Conv2d { .. } => LayerParams::Conv {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            },
            LayerSpec::Linear { .. } => LayerParams::Linear {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            },
            LayerSpec::BatchNorm2d { .. } => LayerParams::BatchNorm {
                gain: it.next().unwrap(),
                shift: it.next().unwrap(),
                running_mean: it.next().unwrap(),
                running_var: it.next().unwrap(),
            },
            _ => LayerParams::None,
        };
        params.push(p);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model: ModelGraph::new(arch, params)?,
        meta: meta.unwrap_or_default(),
    })
}

pub fn save_checkpoint<E: Element>(model: &ModelGraph<E>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<E>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
