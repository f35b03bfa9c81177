//! Named weight tensors and the VTW1 container.
//!
//! VTW1 layout:
//!
//! ```text
//! "VTW1"                      4 bytes
//! header_len                  u64, little-endian
//! header                      header_len bytes of UTF-8 JSON
//! payload                     raw little-endian f32, row-major
//! ```
//!
//! The header is a JSON object mapping each tensor name to
//! `{"dtype": "f32", "shape": [...], "offset": o, "length": l}` where `offset`
//! and `length` are byte counts relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTW1";

/// Standard deviation of synthetic weight matrices.
pub const SYNTH_STD: f32 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Gaussian,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Checks that every tensor `config` needs is present with its exact shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape, _) in required_tensors(config) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian data, in name order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.numel() * 4) as u64;
            header.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a VTW1 buffer without checking it against any config.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Header(format!("{}: file too short", origin.display())));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                found: magic,
            });
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let payload_start = 12usize
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::Header(format!("header length {header_len} exceeds file size")))?;
        let header: BTreeMap<String, TensorEntry> =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| Error::Header(e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut tensors = BTreeMap::new();
        for (name, entry) in header {
            if entry.dtype != "f32" {
                return Err(Error::Header(format!("tensor `{name}` has unsupported dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.length != (numel * 4) as u64 {
                return Err(Error::Header(format!(
                    "tensor `{name}` declares {} bytes for shape {:?}",
                    entry.length, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.length as usize)
                .filter(|end| *end <= payload.len())
                .ok_or_else(|| Error::Header(format!("tensor `{name}` runs past end of payload")))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Reads a VTW1 file and validates it against `config`.
    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let w = Self::from_bytes(&bytes, path)?;
        w.validate(config)?;
        Ok(w)
    }

    /// Deterministic synthetic weights: matrices and embeddings are
    /// `N(0, 0.02²)`, biases zero, norm scales one. Each tensor draws from
    /// its own child stream keyed by its canonical name.
    pub fn synth(config: &ModelConfig, rng: &RngStream) -> Self {
        let mut w = Self::new();
        for (name, shape, init) in required_tensors(config) {
            let t = match init {
                Init::Gaussian => rng.split(&name).gaussian_tensor(shape, SYNTH_STD),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
            };
            w.insert(name, t);
        }
        w
    }
}

/// Canonical tensor names and shapes. Linear weights use the `[out, in]`
/// convention and the patch projection is a `[C, 3, p, p]` convolution kernel.
fn required_tensors(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let d = c.embed_dim;
    let p = c.patch_size;
    let hidden = c.mlp_hidden();
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("patch_embed.weight".into(), vec![d, 3, p, p], Gaussian),
        ("patch_embed.bias".into(), vec![d], Zeros),
        ("pos_embed".into(), vec![1, c.num_tokens(), d], Gaussian),
    ];
    if c.has_class_token {
        v.push(("cls_token".into(), vec![1, 1, d], Gaussian));
    }
    if c.distilled {
        v.push(("dist_token".into(), vec![1, 1, d], Gaussian));
        v.push(("head_dist.weight".into(), vec![c.num_classes, d], Gaussian));
        v.push(("head_dist.bias".into(), vec![c.num_classes], Zeros));
    }
    for i in 0..c.depth {
        let b = format!("blocks.{i}");
        v.push((format!("{b}.ln1.weight"), vec![d], Ones));
        v.push((format!("{b}.ln1.bias"), vec![d], Zeros));
        v.push((format!("{b}.attn.qkv.weight"), vec![3 * d, d], Gaussian));
        v.push((format!("{b}.attn.qkv.bias"), vec![3 * d], Zeros));
        v.push((format!("{b}.attn.proj.weight"), vec![d, d], Gaussian));
        v.push((format!("{b}.attn.proj.bias"), vec![d], Zeros));
        v.push((format!("{b}.ln2.weight"), vec![d], Ones));
        v.push((format!("{b}.ln2.bias"), vec![d], Zeros));
        v.push((format!("{b}.mlp.fc1.weight"), vec![hidden, d], Gaussian));
        v.push((format!("{b}.mlp.fc1.bias"), vec![hidden], Zeros));
        v.push((format!("{b}.mlp.fc2.weight"), vec![d, hidden], Gaussian));
        v.push((format!("{b}.mlp.fc2.bias"), vec![d], Zeros));
    }
    v.push(("norm.weight".into(), vec![d], Ones));
    v.push(("norm.bias".into(), vec![d], Zeros));
    v.push(("head.weight".into(), vec![c.num_classes, d], Gaussian));
    v.push(("head.bias".into(), vec![c.num_classes], Zeros));
    v
}
