//! Single-file model container:
//!
//! ```text
//! magic "DPTQMDL\0" | u32 version | u64 manifest length | manifest JSON | blobs
//! ```
//!
//! Every numeric array of the serialized model is moved out of the manifest
//! into a little-endian blob and replaced by `{"$blob": {dtype, offset, len}}`
//! with offsets relative to the start of the blob region. Float arrays are
//! stored as `f32` when every element is exactly representable, otherwise as
//! `f64`; integer arrays as `i8` or `i64`.

use std::path::Path;

use drift_ptq_core::nn::{Linear, WeightFormat};
use drift_ptq_core::policy::DenoiserPolicy;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"DPTQMDL\0";
pub const CONTAINER_VERSION: u32 = 1;
const BLOB_KEY: &str = "$blob";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobType {
    F32,
    F64,
    I8,
    I64,
}

impl BlobType {
    fn width(self) -> usize {
        match self {
            BlobType::I8 => 1,
            BlobType::F32 => 4,
            BlobType::F64 | BlobType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub dtype: BlobType,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub precision: String,
    pub rotated: bool,
    pub act_quant: bool,
    pub compensated: bool,
}

impl LayerEntry {
    fn of(l: &Linear<f64>) -> Self {
        let precision = match l.format() {
            WeightFormat::Full => "FULL",
            WeightFormat::High16 => "HIGH16",
            WeightFormat::W4 => "W4",
        };
        Self {
            name: l.name().to_string(),
            out_dim: l.out_dim(),
            in_dim: l.in_dim(),
            precision: precision.into(),
            rotated: l.input_rotation().is_some(),
            act_quant: l.act_quant().is_some(),
            compensated: l.post().is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub container_version: u32,
    pub variant: String,
    pub layers: Vec<LayerEntry>,
    /// Configuration and pipeline metadata the model was produced with.
    pub provenance: Value,
    /// Serialized model with blob references in place of numeric arrays.
    pub model: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub manifest: Manifest,
    pub model: DenoiserPolicy,
}

impl ModelContainer {
    pub fn new(variant: &str, model: DenoiserPolicy, provenance: Value) -> Self {
        let manifest = Manifest {
            container_version: CONTAINER_VERSION,
            variant: variant.to_string(),
            layers: model.layers().into_iter().map(LayerEntry::of).collect(),
            provenance,
            model: Value::Null,
        };
        Self { manifest, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut manifest = self.manifest.clone();
        manifest.model = extract_blobs(serde_json::to_value(&self.model)?, &mut blobs);
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| PipelineError::format("model container", d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let end = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[20..end])?;
        let blobs = &bytes[end..];
        let model_value = restore_blobs(std::mem::take(&mut manifest.model), blobs)?;
        let model: DenoiserPolicy = serde_json::from_value(model_value)
            .map_err(|e| PipelineError::format("model container", format!("model does not decode: {e}")))?;
        let layers: Vec<LayerEntry> = model.layers().into_iter().map(LayerEntry::of).collect();
        if layers != manifest.layers {
            return Err(bad("layer table disagrees with the stored model"));
        }
        Ok(Self { manifest, model })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn classify(items: &[Value]) -> Option<BlobType> {
    if items.is_empty() || !items.iter().all(Value::is_number) {
        return None;
    }
    if items.iter().all(|v| v.is_i64() || v.is_u64()) {
        let small = items.iter().all(|v| v.as_i64().is_some_and(|i| (-128..=127).contains(&i)));
        if small {
            return Some(BlobType::I8);
        }
        if items.iter().all(|v| v.as_i64().is_some()) {
            return Some(BlobType::I64);
        }
        return None;
    }
    let exact_f32 = items
        .iter()
        .all(|v| v.as_f64().is_some_and(|x| (x as f32) as f64 == x));
    Some(if exact_f32 { BlobType::F32 } else { BlobType::F64 })
}

fn extract_blobs(v: Value, blobs: &mut Vec<u8>) -> Value {
    match v {
        Value::Array(items) => match classify(&items) {
            Some(dtype) => {
                let offset = blobs.len() as u64;
                for it in &items {
                    match dtype {
                        BlobType::I8 => blobs.push(it.as_i64().expect("classified") as i8 as u8),
                        BlobType::I64 => blobs.extend_from_slice(&it.as_i64().expect("classified").to_le_bytes()),
                        BlobType::F32 => blobs.extend_from_slice(&(it.as_f64().expect("classified") as f32).to_le_bytes()),
                        BlobType::F64 => blobs.extend_from_slice(&it.as_f64().expect("classified").to_le_bytes()),
                    }
                }
                let r = BlobRef {
                    dtype,
                    offset,
                    len: items.len() as u64,
                };
                let mut m = Map::new();
                m.insert(BLOB_KEY.into(), serde_json::to_value(r).expect("blob ref serializes"));
                Value::Object(m)
            }
            None => Value::Array(items.into_iter().map(|x| extract_blobs(x, blobs)).collect()),
        },
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, x)| (k, extract_blobs(x, blobs))).collect()),
        other => other,
    }
}

fn restore_blobs(v: Value, blobs: &[u8]) -> Result<Value> {
    match v {
        Value::Object(m) if m.len() == 1 && m.contains_key(BLOB_KEY) => {
            let r: BlobRef = serde_json::from_value(m[BLOB_KEY].clone())?;
            let w = r.dtype.width();
            let start = r.offset as usize;
            let stop = (r.len as usize)
                .checked_mul(w)
                .and_then(|n| n.checked_add(start))
                .filter(|&s| s <= blobs.len())
                .ok_or_else(|| PipelineError::format("model container", "blob out of bounds"))?;
            let items = blobs[start..stop]
                .chunks_exact(w)
                .map(|c| match r.dtype {
                    BlobType::I8 => Ok(Value::from(c[0] as i8)),
                    BlobType::I64 => Ok(Value::from(i64::from_le_bytes(c.try_into().expect("8 bytes")))),
                    BlobType::F32 => float(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    BlobType::F64 => float(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Value::Array(items))
        }
        Value::Object(m) => Ok(Value::Object(
            m.into_iter()
                .map(|(k, x)| Ok((k, restore_blobs(x, blobs)?)))
                .collect::<Result<_>>()?,
        )),
        Value::Array(items) => Ok(Value::Array(
            items.into_iter().map(|x| restore_blobs(x, blobs)).collect::<Result<_>>()?,
        )),
        other => Ok(other),
    }
}

fn float(x: f64) -> Result<Value> {
    Number::from_f64(x)
        .map(Value::Number)
        .ok_or_else(|| PipelineError::format("model container", "non-finite tensor value"))
}
