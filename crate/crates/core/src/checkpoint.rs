//! Checkpoint reading and writing in the safetensors container format.
//!
//! Layout: an 8-byte little-endian u64 header length, a UTF-8 JSON header
//! mapping tensor names to `{"dtype", "shape", "data_offsets": [begin, end]}`
//! (plus an optional `"__metadata__"` string map), then the raw payload.
//! Offsets are relative to the payload start; data is little-endian,
//! row-major, unpadded.
//!
//! The writer emits F32 only, assigns offsets in lexicographic name order,
//! and adds no alignment padding, so a given `WeightMap` always serializes
//! to identical bytes. The reader accepts F32 payloads plus F16/BF16, which
//! are widened to f32 and flagged in the metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One model checkpoint: named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightMap {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl WeightMap {
    pub fn new() -> Self {
        WeightMap::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

const METADATA_KEY: &str = "__metadata__";
/// Metadata key listing tensors that were widened from F16/BF16 on read.
pub const WIDENED_KEY: &str = "widened";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    fn parse(s: &str, tensor: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::Bf16),
            other => Err(Error::BadTensor {
                name: tensor.to_string(),
                detail: format!("unsupported dtype {other:?}"),
            }),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }
}

/// Serialize a weight map. Tensors are written as F32 (in-memory f64 values
/// are rounded to the nearest f32), in lexicographic name order.
pub fn write_checkpoint(weights: &WeightMap, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(weights))?;
    Ok(())
}

/// The exact byte image `write_checkpoint` produces.
pub fn checkpoint_bytes(weights: &WeightMap) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !weights.metadata.is_empty() {
        let meta: serde_json::Map<String, serde_json::Value> = weights
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), serde_json::Value::Object(meta));
    }
    let mut payload = Vec::new();
    for (name, tensor) in &weights.tensors {
        let begin = payload.len();
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let entry = serde_json::json!({
            "dtype": "F32",
            "shape": tensor.shape(),
            "data_offsets": [begin, payload.len()],
        });
        header.insert(name.clone(), entry);
    }
    // serde_json maps are sorted, so the header text is deterministic.
    let header_text = serde_json::Value::Object(header).to_string();
    let mut out = Vec::with_capacity(8 + header_text.len() + payload.len());
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parse a checkpoint file, materializing every tensor as f32 values
/// (widened from F16/BF16 where necessary, flagged under [`WIDENED_KEY`]).
pub fn read_checkpoint(path: &Path) -> Result<WeightMap> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<WeightMap> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader("file shorter than the 8-byte length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("checked length")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::MalformedHeader(format!("header length {header_len} exceeds file size")))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| Error::MalformedHeader("header is not a JSON object".into()))?;
    let payload = &bytes[payload_start..];

    let mut metadata = BTreeMap::new();
    struct Entry {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        begin: usize,
        end: usize,
    }
    let mut entries = Vec::new();

    for (name, value) in header {
        if name == METADATA_KEY {
            let map = value.as_object().ok_or_else(|| {
                Error::MalformedHeader("__metadata__ is not an object".into())
            })?;
            for (k, v) in map {
                let s = v.as_str().ok_or_else(|| {
                    Error::MalformedHeader(format!("__metadata__ value for {k:?} is not a string"))
                })?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        let bad = |detail: String| Error::BadTensor { name: name.clone(), detail };
        let obj = value
            .as_object()
            .ok_or_else(|| bad("entry is not an object".into()))?;
        let dtype_str = obj
            .get("dtype")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("missing dtype".into()))?;
        let dtype = Dtype::parse(dtype_str, name)?;
        let shape: Vec<usize> = obj
            .get("shape")
            .and_then(|v| v.as_array())
            .ok_or_else(|| bad("missing shape".into()))?
            .iter()
            .map(|v| v.as_u64().map(|e| e as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("shape holds non-integer extents".into()))?;
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(bad(format!("unsupported shape {shape:?}")));
        }
        let offsets = obj
            .get("data_offsets")
            .and_then(|v| v.as_array())
            .filter(|a| a.len() == 2)
            .ok_or_else(|| bad("missing data_offsets".into()))?;
        let begin = offsets[0].as_u64().ok_or_else(|| bad("bad offset".into()))? as usize;
        let end = offsets[1].as_u64().ok_or_else(|| bad("bad offset".into()))? as usize;
        let numel: usize = shape.iter().product();
        if end < begin || end - begin != numel * dtype.size() {
            return Err(bad(format!(
                "offsets [{begin}, {end}) do not cover {numel} x {} bytes",
                dtype.size()
            )));
        }
        if end > payload.len() {
            return Err(bad(format!(
                "payload truncated: needs bytes up to {end}, payload has {}",
                payload.len()
            )));
        }
        entries.push(Entry { name: name.clone(), dtype, shape, begin, end });
    }

    // Offsets must tile the payload exactly: ascending, non-overlapping,
    // contiguous from zero.
    entries.sort_by_key(|e| (e.begin, e.end));
    let mut cursor = 0usize;
    for e in &entries {
        if e.begin < cursor {
            return Err(Error::BadTensor {
                name: e.name.clone(),
                detail: format!("offset {} overlaps the previous tensor ending at {cursor}", e.begin),
            });
        }
        if e.begin > cursor {
            return Err(Error::BadTensor {
                name: e.name.clone(),
                detail: format!("offset {} leaves a gap after {cursor}", e.begin),
            });
        }
        cursor = e.end;
    }
    if cursor != payload.len() {
        return Err(Error::MalformedHeader(format!(
            "payload has {} bytes but tensors cover {cursor}",
            payload.len()
        )));
    }

    let mut map = WeightMap { tensors: BTreeMap::new(), metadata };
    let mut widened = Vec::new();
    for e in entries {
        let raw = &payload[e.begin..e.end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::Bf16 => raw
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
        };
        if e.dtype != Dtype::F32 {
            widened.push(e.name.clone());
        }
        let tensor = Tensor::new(e.shape, data).map_err(|err| Error::BadTensor {
            name: e.name.clone(),
            detail: err.to_string(),
        })?;
        if map.tensors.insert(e.name.clone(), tensor).is_some() {
            return Err(Error::MalformedHeader(format!("duplicate tensor name {:?}", e.name)));
        }
    }
    if !widened.is_empty() {
        widened.sort();
        map.metadata.insert(WIDENED_KEY.to_string(), widened.join(","));
    }
    Ok(map)
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = (bits >> 10) & 0x1F;
    let mantissa = (bits & 0x3FF) as f64;
    match exp {
        0 => sign * mantissa * (2.0f64).powi(-24),
        0x1F => {
            if mantissa == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + mantissa / 1024.0) * (2.0f64).powi(exp as i32 - 15),
    }
}

/// Differences that make a set of models unmergeable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    /// Tensor present in the reference (model 0) but absent from `model`.
    MissingTensor { model: usize, name: String },
    /// Tensor present in `model` but absent from the reference.
    ExtraTensor { model: usize, name: String },
    ShapeMismatch {
        model: usize,
        name: String,
        reference: Vec<usize>,
        found: Vec<usize>,
    },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::MissingTensor { model, name } => {
                write!(f, "model {model} is missing tensor `{name}`")
            }
            Finding::ExtraTensor { model, name } => {
                write!(f, "model {model} has extra tensor `{name}`")
            }
            Finding::ShapeMismatch { model, name, reference, found } => {
                write!(f, "model {model} tensor `{name}` has shape {found:?}, expected {reference:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompatibilityReport {
    pub findings: Vec<Finding>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn summary(&self) -> String {
        self.findings
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Compare model 0 (the reference) against the rest: name-set differences
/// and per-name shape mismatches. An empty report means mergeable.
pub fn validate_compatible(models: &[&WeightMap]) -> Result<CompatibilityReport> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "compatibility check needs at least 2 models, got {}",
            models.len()
        )));
    }
    let reference = models[0];
    let mut findings = Vec::new();
    for (idx, model) in models.iter().enumerate().skip(1) {
        for (name, ref_tensor) in &reference.tensors {
            match model.tensors.get(name) {
                None => findings.push(Finding::MissingTensor { model: idx, name: name.clone() }),
                Some(t) if t.shape() != ref_tensor.shape() => findings.push(Finding::ShapeMismatch {
                    model: idx,
                    name: name.clone(),
                    reference: ref_tensor.shape().to_vec(),
                    found: t.shape().to_vec(),
                }),
                Some(_) => {}
            }
        }
        for name in model.tensors.keys() {
            if !reference.tensors.contains_key(name) {
                findings.push(Finding::ExtraTensor { model: idx, name: name.clone() });
            }
        }
    }
    Ok(CompatibilityReport { findings })
}

/// Require an empty compatibility report, turning findings into an error.
pub fn require_compatible(models: &[&WeightMap]) -> Result<()> {
    let report = validate_compatible(models)?;
    if report.is_compatible() {
        Ok(())
    } else {
        Err(Error::Incompatible(report.summary()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_map() -> WeightMap {
        let mut map = WeightMap::new();
        map.insert("b.second", Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        map.insert("a.first", Tensor::new(vec![2], vec![1.0, 2.5]).unwrap());
        map
    }

    #[test]
    fn round_trip_identity() {
        let map = simple_map();
        let bytes = checkpoint_bytes(&map);
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, map);
        // value round trip is also byte round trip
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn header_prefix_is_hand_checkable() {
        // Build a 2-tensor file by hand from the byte layout and read it.
        let header = r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"y":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        bytes.extend_from_slice(&8.0f32.to_le_bytes());
        let map = parse_checkpoint(&bytes).unwrap();
        assert_eq!(map.get("x").unwrap().data(), &[1.5]);
        assert_eq!(map.get("y").unwrap().data(), &[-2.0, 8.0]);
    }

    #[test]
    fn empty_map_is_header_only() {
        let map = WeightMap::new();
        let bytes = checkpoint_bytes(&map);
        assert_eq!(&bytes[8..], b"{}");
        assert_eq!(parse_checkpoint(&bytes).unwrap(), map);
    }

    #[test]
    fn writes_are_deterministic() {
        let map = simple_map();
        assert_eq!(checkpoint_bytes(&map), checkpoint_bytes(&map));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let map = simple_map();
        let mut bytes = checkpoint_bytes(&map);
        bytes.truncate(bytes.len() - 4);
        match parse_checkpoint(&bytes) {
            Err(Error::BadTensor { name, detail }) => {
                assert_eq!(name, "b.second");
                assert!(detail.contains("truncated"), "{detail}");
            }
            other => panic!("expected BadTensor, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let header = r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"y":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 6]);
        match parse_checkpoint(&bytes) {
            Err(Error::BadTensor { name, detail }) => {
                assert_eq!(name, "y");
                assert!(detail.contains("overlap"), "{detail}");
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let header = r#"{"x":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(parse_checkpoint(&bytes), Err(Error::BadTensor { .. })));
    }

    #[test]
    fn malformed_json_rejected() {
        let header = b"{not json";
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(matches!(parse_checkpoint(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn f16_widening_flags_metadata() {
        // 1.0 in f16 is 0x3C00; 2.0 is 0x4000.
        let header = r#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&0x3C00u16.to_le_bytes());
        bytes.extend_from_slice(&0x4000u16.to_le_bytes());
        let map = parse_checkpoint(&bytes).unwrap();
        assert_eq!(map.get("h").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(map.metadata.get(WIDENED_KEY).unwrap(), "h");
    }

    #[test]
    fn bf16_widening() {
        // 1.5 in bf16: f32 bits 0x3FC00000 >> 16 = 0x3FC0.
        let header = r#"{"b":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&0x3FC0u16.to_le_bytes());
        let map = parse_checkpoint(&bytes).unwrap();
        assert_eq!(map.get("b").unwrap().data(), &[1.5]);
    }

    #[test]
    fn compatibility_findings() {
        let a = simple_map();
        let b = simple_map();
        assert!(validate_compatible(&[&a, &b]).unwrap().is_compatible());

        let mut missing = simple_map();
        missing.tensors.remove("a.first");
        let report = validate_compatible(&[&a, &missing]).unwrap();
        assert_eq!(
            report.findings,
            vec![Finding::MissingTensor { model: 1, name: "a.first".into() }]
        );

        let mut reshaped = simple_map();
        reshaped.insert("a.first", Tensor::new(vec![1, 2], vec![1.0, 2.5]).unwrap());
        let report = validate_compatible(&[&a, &reshaped]).unwrap();
        assert_eq!(
            report.findings,
            vec![Finding::ShapeMismatch {
                model: 1,
                name: "a.first".into(),
                reference: vec![2],
                found: vec![1, 2],
            }]
        );

        assert!(validate_compatible(&[&a]).is_err());
    }
}
