//! Tensor container: `u64` little-endian header length `N`, `N` bytes of JSON
//! header, then the raw little-endian data section.
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}` with
//! offsets relative to the data section, plus an optional `__metadata__`
//! string map. The writer emits metadata first and tensors in data order, and
//! pads the header with spaces to a multiple of 8 bytes; files in that canonical
//! form rewrite byte-for-byte.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::FormatError;
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self, FormatError> {
        match s {
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            other => Err(FormatError::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, String>,
    entries: Vec<(String, TensorInfo)>,
    data: Vec<u8>,
}

/// Header object with key order and duplicates preserved.
struct OrderedHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedHeader {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<OrderedHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(OrderedHeader(out))
            }
        }
        de.deserialize_map(V)
    }
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::MalformedHeader(msg.into())
}

fn parse_info(name: &str, v: &Value) -> Result<TensorInfo, FormatError> {
    let obj = v.as_object().ok_or_else(|| malformed(format!("entry {name} is not an object")))?;
    let dtype =
        obj.get("dtype").and_then(Value::as_str).ok_or_else(|| malformed(format!("entry {name} lacks a dtype")))?;
    let dtype = DType::parse(dtype)?;
    let shape: Vec<usize> = obj
        .get("shape")
        .cloned()
        .and_then(|s| serde_json::from_value(s).ok())
        .ok_or_else(|| malformed(format!("entry {name} has a bad shape")))?;
    let offsets: [usize; 2] = obj
        .get("data_offsets")
        .cloned()
        .and_then(|s| serde_json::from_value(s).ok())
        .ok_or_else(|| malformed(format!("entry {name} has bad data_offsets")))?;
    if obj.len() != 3 {
        return Err(malformed(format!("entry {name} has unexpected fields")));
    }
    Ok(TensorInfo { dtype, shape, data_offsets: offsets })
}

/// Parses and validates a container.
pub fn parse_container(bytes: &[u8]) -> Result<TensorContainer, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { needed: 8, available: bytes.len() as u64 });
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = bytes.len() as u64 - 8;
    if n > available {
        return Err(FormatError::Truncated { needed: n, available });
    }
    let n = n as usize;
    let header = std::str::from_utf8(&bytes[8..8 + n]).map_err(|e| malformed(e.to_string()))?;
    let OrderedHeader(raw) = serde_json::from_str(header).map_err(|e| malformed(e.to_string()))?;
    let data = &bytes[8 + n..];

    let mut metadata = BTreeMap::new();
    let mut entries: Vec<(String, TensorInfo)> = Vec::with_capacity(raw.len());
    let mut seen = std::collections::HashSet::new();
    for (name, value) in raw {
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| malformed(format!("metadata must map strings to strings: {e}")))?;
            continue;
        }
        let info = parse_info(&name, &value)?;
        let [begin, end] = info.data_offsets;
        if begin > end || end > data.len() {
            return Err(FormatError::OutOfBounds { name });
        }
        if begin % info.dtype.size() != 0 {
            return Err(FormatError::Misaligned { name });
        }
        let numel: usize = info.shape.iter().product();
        if numel * info.dtype.size() != end - begin {
            return Err(FormatError::ShapeMismatch { name });
        }
        entries.push((name, info));
    }

    let mut by_start: Vec<&(String, TensorInfo)> = entries.iter().collect();
    by_start.sort_by_key(|(_, i)| (i.data_offsets[0], i.data_offsets[1]));
    for pair in by_start.windows(2) {
        let (a, ia) = pair[0];
        let (b, ib) = pair[1];
        // empty ranges cannot collide
        if ia.data_offsets[1] > ib.data_offsets[0] && ib.data_offsets[0] < ib.data_offsets[1] {
            return Err(FormatError::Overlap { a: a.clone(), b: b.clone() });
        }
    }

    Ok(TensorContainer { metadata, entries, data: data.to_vec() })
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }

    fn insert_raw(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<(), FormatError> {
        if name == METADATA_KEY || self.info(name).is_some() {
            return Err(FormatError::DuplicateName(name.to_string()));
        }
        while !self.data.len().is_multiple_of(dtype.size()) {
            self.data.push(0);
        }
        let begin = self.data.len();
        self.data.extend_from_slice(&bytes);
        self.entries.push((
            name.to_string(),
            TensorInfo { dtype, shape: shape.to_vec(), data_offsets: [begin, self.data.len()] },
        ));
        Ok(())
    }

    pub fn insert_f32(&mut self, name: &str, t: &Tensor) -> Result<(), FormatError> {
        let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.insert_raw(name, DType::F32, t.shape(), bytes)
    }

    pub fn insert_f64(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<(), FormatError> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.insert_raw(name, DType::F64, shape, bytes)
    }

    /// Tensor values as `f32` (`F64` entries are narrowed).
    pub fn get(&self, name: &str) -> Result<Tensor, FormatError> {
        let info = self.info(name).ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
        let raw = &self.data[info.data_offsets[0]..info.data_offsets[1]];
        let values: Vec<f32> = match info.dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32).collect(),
        };
        // zero-extent shapes cannot become a Tensor
        Tensor::new(info.shape.clone(), values).map_err(|_| FormatError::ShapeMismatch { name: name.to_string() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut order: Vec<&(String, TensorInfo)> = self.entries.iter().collect();
        order.sort_by_key(|(_, i)| (i.data_offsets[0], i.data_offsets[1]));
        let mut header = String::from("{");
        let mut first = true;
        if !self.metadata.is_empty() {
            header.push_str(&serde_json::to_string(METADATA_KEY).unwrap());
            header.push(':');
            header.push_str(&serde_json::to_string(&self.metadata).unwrap());
            first = false;
        }
        for (name, info) in order {
            if !first {
                header.push(',');
            }
            first = false;
            header.push_str(&serde_json::to_string(name).unwrap());
            header.push(':');
            header.push_str(&serde_json::to_string(info).unwrap());
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn four_floats() -> Vec<u8> {
        [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn minimal_file_roundtrips_bytewise() {
        let mut header = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#.to_string();
        while !header.len().is_multiple_of(8) {
            header.push(' ');
        }
        let bytes = raw_file(&header, &four_floats());
        let c = parse_container(&bytes).unwrap();
        assert_eq!(c.get("w").unwrap(), Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(c.to_bytes(), bytes);
    }

    #[test]
    fn header_longer_than_file() {
        let mut bytes = raw_file("{}", &[]);
        bytes[0] = 200;
        assert!(matches!(parse_container(&bytes), Err(FormatError::Truncated { .. })));
        assert!(matches!(parse_container(&[1, 2, 3]), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn shared_byte_range() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let bytes = raw_file(header, &four_floats());
        assert!(matches!(parse_container(&bytes), Err(FormatError::Overlap { .. })));
    }

    #[test]
    fn distinct_errors() {
        let oob = r#"{"a":{"dtype":"F32","shape":[8],"data_offsets":[0,32]}}"#;
        assert!(matches!(parse_container(&raw_file(oob, &four_floats())), Err(FormatError::OutOfBounds { .. })));
        let dt = r#"{"a":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#;
        assert!(matches!(parse_container(&raw_file(dt, &four_floats())), Err(FormatError::UnknownDtype(_))));
        let bad = r#"{"a":{"dtype":"F32""#;
        assert!(matches!(parse_container(&raw_file(bad, &four_floats())), Err(FormatError::MalformedHeader(_))));
        let mis = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[2,10]}}"#;
        assert!(matches!(parse_container(&raw_file(mis, &four_floats())), Err(FormatError::Misaligned { .. })));
        let dup = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(parse_container(&raw_file(dup, &four_floats())), Err(FormatError::DuplicateName(_))));
        let shp = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(parse_container(&raw_file(shp, &four_floats())), Err(FormatError::ShapeMismatch { .. })));
    }

    #[test]
    fn metadata_and_f64() {
        let mut c = TensorContainer::new();
        c.metadata.insert("format".into(), "test".into());
        c.insert_f64("x", &[3], &[0.5, -1.25, 8.0]).unwrap();
        c.insert_f32("y", &Tensor::scalar(2.0)).unwrap();
        let bytes = c.to_bytes();
        let back = parse_container(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("x").unwrap().data(), &[0.5, -1.25, 8.0]);
        assert_eq!(back.metadata["format"], "test");
        assert!(c.insert_f32("y", &Tensor::scalar(1.0)).is_err());
    }
}
