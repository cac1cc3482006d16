//! Binary archive format for models and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic         8 bytes  "PTQARCH1"
//! offset 8   header_len    u64
//! offset 16  header        header_len bytes of compact UTF-8 JSON
//!            zero padding  up to the next multiple of 64 (payload start)
//! payload    f32 tensors, each starting at a 64-byte aligned offset
//!            relative to the payload start, zero padded between
//! ```
//!
//! The header lists every tensor as `{name, dtype, shape, offset, length}`
//! with `offset` relative to the payload start and `length` in bytes. See
//! `docs/archive-format.md` for the full header schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, LayerKind, LayerSpec, ModelGraph, Split};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"PTQARCH1";
pub const ALIGNMENT: usize = 64;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<usize>,
    /// Parameter role -> tensor name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    input_shape: Vec<usize>,
    class_count: usize,
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    split: Split,
    class_count: usize,
    labels: Vec<usize>,
    /// Tensor name of the `[n, c, h, w]` image block.
    images: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    Model(ModelHeader),
    Dataset(DatasetHeader),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    body: Body,
    tensors: Vec<TensorEntry>,
}

/// Anything the archive format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Archive {
    Model(ModelGraph),
    Dataset(LabeledDataset),
}

impl Archive {
    fn kind(&self) -> &'static str {
        match self {
            Archive::Model(_) => "model",
            Archive::Dataset(_) => "dataset",
        }
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

struct PayloadWriter<'a> {
    entries: Vec<TensorEntry>,
    tensors: Vec<&'a Tensor>,
    cursor: usize,
}

impl<'a> PayloadWriter<'a> {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            tensors: Vec::new(),
            cursor: 0,
        }
    }

    fn push(&mut self, name: String, t: &'a Tensor) -> String {
        let length = t.len() * 4;
        self.entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: self.cursor as u64,
            length: length as u64,
        });
        self.tensors.push(t);
        self.cursor = align(self.cursor + length);
        name
    }
}

/// Serializes an archive to bytes. Identical objects give identical bytes.
pub fn to_bytes(object: &Archive) -> Result<Vec<u8>> {
    let mut payload = PayloadWriter::new();
    let body = match object {
        Archive::Model(m) => {
            m.validate()?;
            let layers = m
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| LayerHeader {
                    kind: l.kind,
                    input: l.input,
                    params: l
                        .params
                        .iter()
                        .map(|(role, t)| (role.clone(), payload.push(format!("layers.{i}.{role}"), t)))
                        .collect(),
                })
                .collect();
            Body::Model(ModelHeader {
                input_shape: m.input_shape().to_vec(),
                class_count: m.class_count(),
                metadata: m.metadata.clone(),
                layers,
            })
        }
        Archive::Dataset(d) => Body::Dataset(DatasetHeader {
            split: d.split,
            class_count: d.class_count(),
            labels: d.labels().to_vec(),
            images: payload.push("images".into(), d.images()),
        }),
    };
    let header = Header {
        format_version: FORMAT_VERSION,
        body,
        tensors: payload.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let payload_start = align(16 + json.len());
    let mut out = Vec::with_capacity(payload_start + payload.cursor);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for (entry, t) in header.tensors.iter().zip(&payload.tensors) {
        out.resize(payload_start + entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(payload_start + payload.cursor, 0);
    Ok(out)
}

/// Parses and validates an archive held in memory.
pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 8] = bytes[..8].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedPayload("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::TruncatedPayload(format!("header of {header_len} bytes")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ShapeContractViolation(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[align(header_end).min(bytes.len())..];

    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::ShapeContractViolation(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.length as usize != count * 4 {
            return Err(Error::ShapeContractViolation(format!(
                "tensor {} length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.length as usize)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::TruncatedPayload(format!("tensor {} past end of file", e.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::ShapeContractViolation(format!("unknown tensor {name}")))
    };

    match header.body {
        Body::Model(m) => {
            let mut layers = Vec::with_capacity(m.layers.len());
            for lh in m.layers {
                let mut layer = LayerSpec::new(lh.kind);
                layer.input = lh.input;
                for (role, name) in lh.params {
                    layer.params.insert(role, take(&name)?);
                }
                layers.push(layer);
            }
            Ok(Archive::Model(ModelGraph::new(m.input_shape, m.class_count, layers, m.metadata)?))
        }
        Body::Dataset(d) => {
            let images = take(&d.images)?;
            Ok(Archive::Dataset(LabeledDataset::new(images, d.labels, d.class_count, d.split)?))
        }
    }
}

pub fn save_archive(object: &Archive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(object)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    save_archive(&Archive::Model(model.clone()), path)
}

pub fn save_dataset(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    save_archive(&Archive::Dataset(data.clone()), path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    match load_archive(path)? {
        Archive::Model(m) => Ok(m),
        other => Err(Error::WrongArchiveKind {
            expected: "model",
            found: other.kind().into(),
        }),
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    match load_archive(path)? {
        Archive::Dataset(d) => Ok(d),
        other => Err(Error::WrongArchiveKind {
            expected: "dataset",
            found: other.kind().into(),
        }),
    }
}
