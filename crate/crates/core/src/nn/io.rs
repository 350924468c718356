//! `ATEV` weight files.
//!
//! Layout:
//!
//! ```text
//! b"ATEV" | u32 LE version (=1) | u64 LE header length | UTF-8 JSON header | f32 LE blobs
//! ```
//!
//! The header lists layer descriptors, parameter shapes with their byte
//! offsets into the blob section, taps, the head start and the nominal input
//! shape. Blobs are concatenated in layer order, parameters in
//! [`Layer::params`] order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm2d, Conv2d, Layer, Linear, RegionPool};
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATEV";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug)]
struct Header {
    layers: Vec<LayerDesc>,
    taps: BTreeMap<String, usize>,
    head_start: usize,
    input_shape: Vec<usize>,
    tiles: usize,
}

#[derive(Serialize, Deserialize, Debug)]
struct LayerDesc {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_pool: Option<RegionPool>,
    params: Vec<BlobDesc>,
}

#[derive(Serialize, Deserialize, Debug)]
struct BlobDesc {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
}

fn blob_names(layer: &Layer) -> Vec<&'static str> {
    match layer {
        Layer::Conv2d(c) => std::iter::once("weight").chain(c.bias.as_ref().map(|_| "bias")).collect(),
        Layer::Linear(l) => std::iter::once("weight").chain(l.bias.as_ref().map(|_| "bias")).collect(),
        Layer::BatchNorm2d(_) => vec!["gamma", "beta", "running_mean", "running_var"],
        _ => Vec::new(),
    }
}

fn blobs(layer: &Layer) -> Vec<&Tensor> {
    match layer {
        Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
        other => other.params(),
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut descs = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut params = Vec::new();
        for (name, t) in blob_names(layer).into_iter().zip(blobs(layer)) {
            params.push(BlobDesc {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let (stride, padding, kernel, eps, region_pool) = match layer {
            Layer::Conv2d(c) => (Some(c.stride), Some(c.padding), None, None, None),
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                (Some(*stride), None, Some(*kernel), None, None)
            }
            Layer::BatchNorm2d(b) => (None, None, None, Some(b.eps), None),
            Layer::RegionAvgPool(p) => (None, None, None, None, Some(p.clone())),
            _ => (None, None, None, None, None),
        };
        descs.push(LayerDesc {
            kind: layer.kind().to_string(),
            stride,
            padding,
            kernel,
            eps,
            region_pool,
            params,
        });
    }
    let header = Header {
        layers: descs,
        taps: model.taps.clone(),
        head_start: model.head_start,
        input_shape: model.input_shape.clone(),
        tiles: model.tiles,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in &model.layers {
        for t in blobs(layer) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            what: "weight file",
            expected: "ATEV",
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            what: "weight file preamble",
            needed: 16,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            what: "weight file",
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize.saturating_add(header_len);
    if bytes.len() < blob_start {
        return Err(Error::Truncated {
            what: "weight file header",
            needed: blob_start,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..blob_start])?;
    let blob = &bytes[blob_start..];

    let read = |d: &BlobDesc| -> Result<Tensor> {
        let n: usize = d.shape.iter().product();
        let start = d.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(Error::Truncated {
                what: "weight blob",
                needed: blob_start + end,
                found: bytes.len(),
            });
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(d.shape.clone(), data)
    };
    let param = |desc: &LayerDesc, name: &str| -> Result<Option<Tensor>> {
        desc.params.iter().find(|p| p.name == name).map(read).transpose()
    };
    let required = |desc: &LayerDesc, name: &str| -> Result<Tensor> {
        param(desc, name)?.ok_or_else(|| Error::InvalidModel(format!("{} layer missing `{name}`", desc.kind)))
    };
    let field = |v: Option<usize>, desc: &LayerDesc, name: &str| {
        v.ok_or_else(|| Error::InvalidModel(format!("{} layer missing `{name}`", desc.kind)))
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for d in &header.layers {
        let layer = match d.kind.as_str() {
            "conv2d" => Layer::Conv2d(Conv2d {
                weight: required(d, "weight")?,
                bias: param(d, "bias")?,
                stride: field(d.stride, d, "stride")?,
                padding: field(d.padding, d, "padding")?,
            }),
            "linear" => Layer::Linear(Linear {
                weight: required(d, "weight")?,
                bias: param(d, "bias")?,
            }),
            "relu" => Layer::ReLU,
            "maxpool2d" => Layer::MaxPool2d {
                kernel: field(d.kernel, d, "kernel")?,
                stride: field(d.stride, d, "stride")?,
            },
            "avgpool2d" => Layer::AvgPool2d {
                kernel: field(d.kernel, d, "kernel")?,
                stride: field(d.stride, d, "stride")?,
            },
            "global_avg_pool" => Layer::GlobalAvgPool,
            "batchnorm2d" => Layer::BatchNorm2d(BatchNorm2d {
                gamma: required(d, "gamma")?,
                beta: required(d, "beta")?,
                running_mean: required(d, "running_mean")?,
                running_var: required(d, "running_var")?,
                eps: d.eps.ok_or_else(|| Error::InvalidModel("batchnorm2d missing `eps`".into()))?,
            }),
            "flatten" => Layer::Flatten,
            "region_avg_pool" => Layer::RegionAvgPool(
                d.region_pool
                    .clone()
                    .ok_or_else(|| Error::InvalidModel("region_avg_pool missing descriptor".into()))?,
            ),
            other => return Err(Error::InvalidModel(format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    let model = Model {
        layers,
        taps: header.taps,
        head_start: header.head_start,
        input_shape: header.input_shape,
        tiles: header.tiles,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("atev.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// SHA-256 of the serialized model, hex encoded.
pub fn model_hash(model: &Model) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(to_bytes(model)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_bad_magic() {
        assert!(matches!(from_bytes(&[]), Err(Error::BadMagic { .. })));
        assert!(matches!(from_bytes(b"NOPE1234"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_and_truncation_are_distinct_errors() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(Error::VersionMismatch { found: 2, .. })));

        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&100u64.to_le_bytes());
        b.extend_from_slice(b"{}");
        assert!(matches!(from_bytes(&b), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(b"ATEV"), Err(Error::Truncated { .. })));
    }
}
