//! `ALNCKPT1` single-file checkpoints.
//!
//! ```text
//! bytes 0..8     b"ALNCKPT1"
//! bytes 8..12    format version, u32 little-endian (currently 1)
//! bytes 12..16   header length H, u32 little-endian
//! bytes 16..16+H UTF-8 JSON header
//! then           little-endian f32 blobs, in the order listed by the header
//! ```
//!
//! The header holds the layer structure, all gate values (as JSON numbers,
//! which round-trip `f64` exactly), the iteration counter and the shuffling
//! RNG state; weights, biases and optional momentum buffers live in the
//! blobs. Parameters are kept `f32`-representable during training, so a
//! save/load cycle is bit-exact.

use std::path::Path;

use archlearn_core::learn::{LayerVelocity, Momentum};
use archlearn_core::nn::{Conv2dLayer, DenseLayer, GateParams, Layer, MaxPoolLayer, Network};
use archlearn_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"ALNCKPT1";
pub const VERSION: u32 = 1;

/// A network plus everything needed to resume training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub iteration: u64,
    pub rng_state: u64,
    pub momentum: Option<Momentum>,
    /// Resolved experiment configuration, for provenance.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerHeader {
    Dense { out: usize, inp: usize, bias: bool, gate: Option<GateParams> },
    Conv { filters: usize, channels: usize, kh: usize, kw: usize, stride: usize, gate: Option<GateParams> },
    Pool { window: usize },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input: [usize; 3],
    layers: Vec<LayerHeader>,
    iteration: u64,
    rng_state: u64,
    has_momentum: bool,
    blobs: Vec<BlobHeader>,
    config: Option<serde_json::Value>,
}

/// Serializes a checkpoint. Values are stored as `f32`.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let net = &ckpt.network;
    let mut layers = Vec::new();
    let mut blobs: Vec<(String, &[f64])> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(l) => {
                layers.push(LayerHeader::Dense {
                    out: l.out_features(),
                    inp: l.in_features(),
                    bias: l.bias.is_some(),
                    gate: l.gate.clone(),
                });
                blobs.push((format!("layer{i}.weights"), l.weights.data()));
                if let Some(b) = &l.bias {
                    blobs.push((format!("layer{i}.bias"), b));
                }
            }
            Layer::Conv(l) => {
                let (kh, kw) = l.kernel_size();
                layers.push(LayerHeader::Conv {
                    filters: l.filters(),
                    channels: l.in_channels(),
                    kh,
                    kw,
                    stride: l.stride,
                    gate: l.gate.clone(),
                });
                blobs.push((format!("layer{i}.weights"), l.kernels.data()));
                blobs.push((format!("layer{i}.bias"), &l.bias));
            }
            Layer::Pool(p) => layers.push(LayerHeader::Pool { window: p.window }),
        }
    }
    if let Some(m) = &ckpt.momentum {
        for (i, v) in m.layers.iter().enumerate() {
            if let Some(v) = v {
                blobs.push((format!("layer{i}.weights.velocity"), &v.weights));
                if let Some(b) = &v.bias {
                    blobs.push((format!("layer{i}.bias.velocity"), b));
                }
            }
        }
    }
    let header = Header {
        input: net.input_shape(),
        layers,
        iteration: ckpt.iteration,
        rng_state: ckpt.rng_state,
        has_momentum: ckpt.momentum.is_some(),
        blobs: blobs.iter().map(|(name, data)| BlobHeader { name: name.clone(), len: data.len() }).collect(),
        config: ckpt.config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = blobs.iter().map(|(_, d)| d.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    for (_, data) in blobs {
        for &v in data {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint; `path` is used only in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> AppResult<Checkpoint> {
    let err = |m: String| AppError::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("not an ALNCKPT1 checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hbytes = bytes.get(16..16 + hlen).ok_or_else(|| err(format!("header of {hlen} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| err(format!("bad header: {e}")))?;

    let mut offset = 16 + hlen;
    let mut blobs = header.blobs.iter();
    let mut next = |name: &str, len: usize| -> AppResult<Vec<f64>> {
        let b = blobs.next().ok_or_else(|| err(format!("blob `{name}` missing from header")))?;
        if b.name != name || b.len != len {
            return Err(err(format!("expected blob `{name}` of {len} values, header lists `{}` of {}", b.name, b.len)));
        }
        let end = offset + 4 * len;
        let raw = bytes.get(offset..end).ok_or_else(|| {
            err(format!("blob `{name}` needs {} bytes at offset {offset}, file has {}", 4 * len, bytes.len()))
        })?;
        offset = end;
        Ok(raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect())
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.iter().enumerate() {
        let layer = match lh {
            LayerHeader::Dense { out, inp, bias, gate } => {
                let w = Tensor::new(vec![*out, *inp], next(&format!("layer{i}.weights"), out * inp)?)?;
                let b = if *bias { Some(next(&format!("layer{i}.bias"), *out)?) } else { None };
                Layer::Dense(DenseLayer::new(w, b, gate.clone())?)
            }
            LayerHeader::Conv { filters, channels, kh, kw, stride, gate } => {
                let n = filters * channels * kh * kw;
                let k = Tensor::new(vec![*filters, *channels, *kh, *kw], next(&format!("layer{i}.weights"), n)?)?;
                let b = next(&format!("layer{i}.bias"), *filters)?;
                let mut c = Conv2dLayer::new(k, b, gate.clone())?;
                c.stride = *stride;
                Layer::Conv(c)
            }
            LayerHeader::Pool { window } => Layer::Pool(MaxPoolLayer { window: *window }),
        };
        layers.push(layer);
    }
    let network = Network::new(header.input, layers)?;
    for g in network.gates().map(|(_, g)| g) {
        if g.binarized().is_err() {
            return Err(err("gate value outside [0, 1]".into()));
        }
    }

    let momentum = if header.has_momentum {
        let mut m = Momentum::zeros(&network);
        for (i, slot) in m.layers.iter_mut().enumerate() {
            if let Some(v) = slot {
                let weights = next(&format!("layer{i}.weights.velocity"), v.weights.len())?;
                let bias = match &v.bias {
                    Some(b) => Some(next(&format!("layer{i}.bias.velocity"), b.len())?),
                    None => None,
                };
                *v = LayerVelocity { weights, bias };
            }
        }
        Some(m)
    } else {
        None
    };
    if blobs.next().is_some() {
        return Err(err("header lists more blobs than the network uses".into()));
    }
    if offset != bytes.len() {
        return Err(err(format!("{} trailing bytes after the last blob", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        network,
        iteration: header.iteration,
        rng_state: header.rng_state,
        momentum,
        config: header.config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, encode(ckpt)).map_err(|e| AppError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes, path)
}
