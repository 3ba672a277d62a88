//! On-disk formats: the floating-point tensor container and the quantized-model file.

mod container;
mod quantized;

pub use container::{parse_container, DType, TensorContainer, TensorInfo};
pub use quantized::{read_quantized, write_quantized, QuantizedLayer, QuantizedModel, MAGIC, VERSION};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dit::{DiTConfig, DitModel};
use crate::error::{Error, Result};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("truncated input: need {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors {a} and {b} share bytes")]
    Overlap { a: String, b: String },
    #[error("tensor {name} lies outside the data section")]
    OutOfBounds { name: String },
    #[error("tensor {name} is not aligned to its dtype")]
    Misaligned { name: String },
    #[error("tensor {name}: byte range does not match shape")]
    ShapeMismatch { name: String },
    #[error("unsupported dtype {0}")]
    UnknownDtype(String),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("no tensor named {0}")]
    MissingTensor(String),
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("payload holds {actual} bytes, header describes {expected}")]
    PayloadLength { expected: u64, actual: u64 },
}

const CONFIG_KEY: &str = "config";

/// Stores every model parameter plus the configuration as JSON metadata.
pub fn model_to_container(model: &DitModel) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.metadata.insert(CONFIG_KEY.into(), serde_json::to_string(&model.config).expect("serializable"));
    for (name, t) in &model.params {
        c.insert_f32(name, t).expect("unique names");
    }
    c
}

pub fn model_from_container(c: &TensorContainer) -> Result<DitModel> {
    let raw =
        c.metadata.get(CONFIG_KEY).ok_or_else(|| FormatError::MalformedHeader("missing config metadata".into()))?;
    let config: DiTConfig =
        serde_json::from_str(raw).map_err(|e| FormatError::MalformedHeader(format!("config metadata: {e}")))?;
    let mut params = BTreeMap::new();
    for name in c.names() {
        params.insert(name.to_string(), c.get(name)?);
    }
    DitModel::new(config, params)
}

pub fn read_model(bytes: &[u8]) -> Result<DitModel> {
    model_from_container(&parse_container(bytes).map_err(Error::from)?)
}
