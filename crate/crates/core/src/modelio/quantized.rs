//! Quantized-model file.
//!
//! ```text
//! u32 magic 0x56513444 | u32 version (1) | u64 header length N | N bytes JSON header | payload
//! ```
//!
//! All integers little-endian. The payload holds every layer's codebook
//! (`k * d` little-endian `f32`), then every layer's packed assignments, then
//! the passthrough tensors (`f32`), each in header order with no gaps. The
//! header is padded with spaces so the payload starts on an 8-byte boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FormatError;
use crate::dit::{DiTConfig, DitModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vq::{
    pack, reconstruct_hard, storage_report, unpack, Assignments, Codebook, LayerShape, PackedAssignments, StorageReport,
};

pub const MAGIC: u32 = 0x5651_3444;
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// A layer with finalized, bit-packed assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub shape: LayerShape,
    pub codebook: Codebook,
    pub packed: PackedAssignments,
}

impl QuantizedLayer {
    pub fn new(name: &str, shape: LayerShape, codebook: Codebook, assignments: &Assignments) -> Result<Self> {
        shape.validate()?;
        if codebook.k() != shape.k || codebook.d() != shape.d {
            return Err(Error::Dimension(format!(
                "codebook {}x{} for layer shape {shape:?}",
                codebook.k(),
                codebook.d()
            )));
        }
        if assignments.len() != shape.subvector_count() {
            return Err(Error::Dimension(format!(
                "{} assignments for {} sub-vectors",
                assignments.len(),
                shape.subvector_count()
            )));
        }
        let packed = pack(assignments, shape.k)?;
        Ok(Self { name: name.to_string(), shape, codebook, packed })
    }

    pub fn assignments(&self) -> Result<Assignments> {
        unpack(&self.packed, self.shape.subvector_count(), self.shape.k)
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        reconstruct_hard(&self.codebook, &self.assignments()?, self.shape.o, self.shape.i)
    }

    pub fn storage(&self) -> StorageReport {
        storage_report(&self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: DiTConfig,
    pub layers: Vec<QuantizedLayer>,
    /// Unquantized tensors (biases, embeddings, projections), by name.
    pub passthrough: Vec<(String, Tensor)>,
}

impl QuantizedModel {
    /// The floating-point model obtained by hard reconstruction of every layer.
    pub fn to_dit_model(&self) -> Result<DitModel> {
        let mut params = BTreeMap::new();
        for (name, t) in &self.passthrough {
            params.insert(name.clone(), t.clone());
        }
        for layer in &self.layers {
            params.insert(layer.name.clone(), layer.reconstruct()?);
        }
        DitModel::new(self.config.clone(), params)
    }

    pub fn layer(&self, name: &str) -> Option<&QuantizedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    name: String,
    o: usize,
    i: usize,
    d: usize,
    k: usize,
    codebook: [u64; 2],
    assignments: [u64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PassRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DiTConfig,
    layers: Vec<LayerRecord>,
    passthrough: Vec<PassRecord>,
}

type Ranges = Vec<[u64; 2]>;

/// Canonical payload ranges for the given sizes, in layout order.
fn layout(codebooks: &[u64], packed: &[u64], passthrough: &[u64]) -> (Ranges, Ranges, Ranges, u64) {
    let mut pos = 0u64;
    let mut take = |sizes: &[u64]| -> Vec<[u64; 2]> {
        sizes
            .iter()
            .map(|&s| {
                let r = [pos, pos + s];
                pos += s;
                r
            })
            .collect()
    };
    let a = take(codebooks);
    let b = take(packed);
    let c = take(passthrough);
    (a, b, c, pos)
}

pub fn write_quantized(model: &QuantizedModel) -> Result<Vec<u8>> {
    let cb_sizes: Vec<u64> = model.layers.iter().map(|l| (l.codebook.words().len() * 4) as u64).collect();
    let pk_sizes: Vec<u64> = model.layers.iter().map(|l| l.packed.payload.len() as u64).collect();
    let pt_sizes: Vec<u64> = model.passthrough.iter().map(|(_, t)| (t.numel() * 4) as u64).collect();
    let (cb_r, pk_r, pt_r, total) = layout(&cb_sizes, &pk_sizes, &pt_sizes);

    for l in &model.layers {
        let expected = PackedAssignments::payload_len(l.shape.subvector_count(), l.shape.index_bits());
        if l.packed.payload.len() != expected {
            return Err(FormatError::PayloadLength {
                expected: expected as u64,
                actual: l.packed.payload.len() as u64,
            }
            .into());
        }
    }

    let header = Header {
        config: model.config.clone(),
        layers: model
            .layers
            .iter()
            .zip(cb_r.iter().zip(&pk_r))
            .map(|(l, (&cb, &pk))| LayerRecord {
                name: l.name.clone(),
                o: l.shape.o,
                i: l.shape.i,
                d: l.shape.d,
                k: l.shape.k,
                codebook: cb,
                assignments: pk,
            })
            .collect(),
        passthrough: model
            .passthrough
            .iter()
            .zip(&pt_r)
            .map(|((name, t), &r)| PassRecord {
                name: name.clone(),
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: r,
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&header).expect("serializable header");
    while !(PREAMBLE + text.len()).is_multiple_of(8) {
        text.push(' ');
    }

    let mut out = Vec::with_capacity(PREAMBLE + text.len() + total as usize);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for l in &model.layers {
        out.extend(l.codebook.words().iter().flat_map(|v| v.to_le_bytes()));
    }
    for l in &model.layers {
        out.extend_from_slice(&l.packed.payload);
    }
    for (_, t) in &model.passthrough {
        out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()
}

pub fn read_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    if bytes.len() < PREAMBLE {
        return Err(FormatError::Truncated { needed: PREAMBLE as u64, available: bytes.len() as u64 }.into());
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - PREAMBLE) as u64;
    if n > available {
        return Err(FormatError::Truncated { needed: n, available }.into());
    }
    let n = n as usize;
    let text =
        std::str::from_utf8(&bytes[PREAMBLE..PREAMBLE + n]).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[PREAMBLE + n..];

    let mut shapes = Vec::with_capacity(header.layers.len());
    for r in &header.layers {
        let shape = LayerShape::new(r.o, r.i, r.d, r.k)
            .map_err(|e| FormatError::MalformedHeader(format!("layer {}: {e}", r.name)))?;
        shapes.push(shape);
    }
    for p in &header.passthrough {
        if p.dtype != "F32" {
            return Err(FormatError::UnknownDtype(p.dtype.clone()).into());
        }
        if p.shape.is_empty() || p.shape.contains(&0) {
            return Err(FormatError::ShapeMismatch { name: p.name.clone() }.into());
        }
    }

    let cb_sizes: Vec<u64> = shapes.iter().map(|s| (s.k * s.d * 4) as u64).collect();
    let pk_sizes: Vec<u64> =
        shapes.iter().map(|s| PackedAssignments::payload_len(s.subvector_count(), s.index_bits()) as u64).collect();
    let pt_sizes: Vec<u64> =
        header.passthrough.iter().map(|p| (p.shape.iter().product::<usize>() * 4) as u64).collect();
    let (cb_r, pk_r, pt_r, total) = layout(&cb_sizes, &pk_sizes, &pt_sizes);

    for (r, (cb, pk)) in header.layers.iter().zip(cb_r.iter().zip(&pk_r)) {
        if r.codebook != *cb || r.assignments != *pk {
            return Err(FormatError::MalformedHeader(format!("layer {} ranges do not match its shape", r.name)).into());
        }
    }
    for (p, r) in header.passthrough.iter().zip(&pt_r) {
        if p.data_offsets != *r {
            return Err(FormatError::ShapeMismatch { name: p.name.clone() }.into());
        }
    }
    if payload.len() as u64 != total {
        return Err(FormatError::PayloadLength { expected: total, actual: payload.len() as u64 }.into());
    }

    let slice = |r: [u64; 2]| &payload[r[0] as usize..r[1] as usize];
    let mut layers = Vec::with_capacity(shapes.len());
    for ((r, shape), (cb, pk)) in header.layers.iter().zip(shapes).zip(cb_r.iter().zip(&pk_r)) {
        let codebook = Codebook::new(shape.k, shape.d, f32s(slice(*cb)))?;
        let packed = PackedAssignments { bits_per_index: shape.index_bits(), payload: slice(*pk).to_vec() };
        layers.push(QuantizedLayer { name: r.name.clone(), shape, codebook, packed });
    }
    let mut passthrough = Vec::with_capacity(header.passthrough.len());
    for (p, r) in header.passthrough.iter().zip(&pt_r) {
        passthrough.push((p.name.clone(), Tensor::new(p.shape.clone(), f32s(slice(*r)))?));
    }
    Ok(QuantizedModel { config: header.config, layers, passthrough })
}
