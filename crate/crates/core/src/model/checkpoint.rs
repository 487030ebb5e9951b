//! Single-file checkpoints.
//!
//! ```text
//! [0..8)     magic  b"EATCKPT\0"
//! [8..16)    manifest length N, u64 little-endian
//! [16..16+N) manifest, UTF-8 JSON
//! [16+N..)   tensor data, little-endian, at the manifest's byte offsets
//! ```
//!
//! The manifest carries the model spec, seed, format version, element type and
//! a `name / shape / dtype / offset / nbytes` entry per tensor, so the file can
//! be read with nothing but a JSON parser.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EATCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Relative to the start of the data section.
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub dtype: DType,
    pub spec: ModelSpec,
    /// Free-form run information (epoch, val accuracy, ...).
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded model at the precision it was saved in.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            AnyModel::F32(m) => m.spec(),
            AnyModel::F64(m) => m.spec(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let offset = data.len();
        for &v in t.data() {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            nbytes: data.len() - offset,
        });
    }
    let manifest = Checkpoint {
        format_version: FORMAT_VERSION,
        seed: model.seed(),
        dtype: T::DTYPE,
        spec: model.spec().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Atomically writes `model` to `path`.
pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta)?)
}

fn read_tensors<T: Real>(manifest: &Checkpoint, data: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    manifest
        .tensors
        .iter()
        .map(|e| {
            if e.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "tensor {} has dtype {} in a {} checkpoint",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            let size = T::DTYPE.size_of();
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= data.len());
            let Some(end) = end.filter(|_| e.nbytes == numel * size) else {
                return Err(Error::Format(format!(
                    "tensor {} ({} bytes at offset {}) does not fit the data section of {} bytes",
                    e.name,
                    e.nbytes,
                    e.offset,
                    data.len()
                )));
            };
            let values = data[e.offset..end].chunks_exact(size).map(T::read_le).collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), values)?))
        })
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Checkpoint, AnyModel)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic or header)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice")) as usize;
    let data_start = 16usize
        .checked_add(len)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| Error::Format(format!("manifest of {len} bytes is truncated")))?;
    let manifest: Checkpoint =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let data = &bytes[data_start..];
    let expected: usize = manifest.tensors.iter().map(|e| e.nbytes).sum();
    if data.len() != expected {
        return Err(Error::Format(format!(
            "data section holds {} bytes, manifest describes {expected}",
            data.len()
        )));
    }
    let spec = manifest.spec.clone();
    let model = match manifest.dtype {
        DType::F32 => AnyModel::F32(Model::from_params(spec, manifest.seed, read_tensors(&manifest, data)?)?),
        DType::F64 => AnyModel::F64(Model::from_params(spec, manifest.seed, read_tensors(&manifest, data)?)?),
    };
    Ok((manifest, model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, AnyModel)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::<f32>::build(ModelSpec::micro(3), 9).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "4".to_string());
        let bytes = encode_checkpoint(&model, &meta).unwrap();
        let (manifest, loaded) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(manifest.meta, meta);
        assert_eq!(manifest.seed, 9);
        let AnyModel::F32(loaded) = loaded else {
            panic!("dtype changed")
        };
        assert_eq!(loaded.params().checksum(), model.params().checksum());
    }

    #[test]
    fn manifest_is_plain_json() {
        let model = Model::<f64>::build(ModelSpec::micro(3), 1).unwrap();
        let bytes = encode_checkpoint(&model, &BTreeMap::new()).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(v["dtype"], "f64");
        let first = &v["tensors"][0];
        let off = first["offset"].as_u64().unwrap() as usize;
        let raw = &bytes[16 + len + off..16 + len + off + 8];
        let name = first["name"].as_str().unwrap();
        let id = model.params().find(name).unwrap();
        assert_eq!(
            f64::from_le_bytes(raw.try_into().unwrap()),
            model.params().get(id).data()[0]
        );
    }

    #[test]
    fn truncation_is_a_format_error() {
        let model = Model::<f32>::build(ModelSpec::micro(3), 0).unwrap();
        let bytes = encode_checkpoint(&model, &BTreeMap::new()).unwrap();
        for cut in [0, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }
}
