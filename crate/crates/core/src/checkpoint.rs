//! Single-file checkpoint archive.
//!
//! ```text
//! "OTACKPT1"                 8-byte magic
//! header_len                 u64 little-endian
//! header                     JSON: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
//! payload                    raw little-endian array data, offsets relative to payload start
//! digest                     32-byte SHA-256 of every preceding byte
//! ```
//!
//! Any modification of the file is caught by the trailing digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{load_params, named_params, Params};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OTACKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Array {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        let mut bytes = Vec::new();
        S::write_le(t.data(), &mut bytes);
        let values = match S::DTYPE {
            DType::F32 => Values::F32(f32::read_le(&bytes)),
            DType::F64 => Values::F64(f64::read_le(&bytes)),
        };
        Self {
            shape: t.shape().to_vec(),
            values,
        }
    }

    pub fn dtype(&self) -> DType {
        match self.values {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match &self.values {
            Values::F32(v) => f32::write_le(v, &mut out),
            Values::F64(v) => f64::write_le(v, &mut out),
        }
        out
    }

    /// Tensor view in element type `S`; exact when `S` matches the stored dtype.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data: Vec<S> = if S::DTYPE == self.dtype() {
            S::read_le(&self.bytes())
        } else {
            match &self.values {
                Values::F32(v) => v.iter().map(|&x| S::lit(x as f64)).collect(),
                Values::F64(v) => v.iter().map(|&x| S::lit(x)).collect(),
            }
        };
        Tensor::new(self.shape.clone(), data).expect("array shape")
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype() == other.dtype() && self.bytes() == other.bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage_name: String,
    pub seed: u64,
    pub config_digest: String,
    pub created_at: String,
    /// Architecture and other stage-specific descriptors.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(stage_name: &str, seed: u64, config_digest: String) -> Self {
        Self {
            stage_name: stage_name.to_string(),
            seed,
            config_digest,
            created_at: created_at(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.extra = extra;
        self
    }
}

/// Seconds since the epoch; honours `SOURCE_DATE_EPOCH` for reproducible artifacts.
pub fn created_at() -> String {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn config_digest<T: Serialize + ?Sized>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Array>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            params: BTreeMap::new(),
            meta,
        }
    }

    pub fn from_module<S: Scalar, M: Params<S> + ?Sized>(module: &M, prefix: &str, meta: CheckpointMeta) -> Self {
        let mut c = Self::new(meta);
        c.insert_module(module, prefix);
        c
    }

    pub fn insert_module<S: Scalar, M: Params<S> + ?Sized>(&mut self, module: &M, prefix: &str) {
        for (name, t) in named_params(module, prefix) {
            self.params.insert(name, Array::from_tensor(&t));
        }
    }

    pub fn insert<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.params.insert(name.to_string(), Array::from_tensor(t));
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.params
            .get(name)
            .map(|a| a.to_tensor())
            .ok_or_else(|| Error::Format(format!("checkpoint has no array '{name}'")))
    }

    pub fn tensors<S: Scalar>(&self) -> BTreeMap<String, Tensor<S>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect()
    }

    pub fn load_into<S: Scalar, M: Params<S> + ?Sized>(&self, module: &mut M, prefix: &str) -> Result<()> {
        load_params(module, prefix, &self.tensors())
    }

    /// Bit-level equality of every array plus metadata equality.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut arrays = Vec::with_capacity(self.params.len());
        for (name, arr) in &self.params {
            let bytes = arr.bytes();
            arrays.push(ArrayEntry {
                name: name.clone(),
                dtype: arr.dtype(),
                shape: arr.shape.clone(),
                offset: payload.len(),
                nbytes: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + 8 + header.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 8 + 32 {
            return Err(Error::Integrity("archive truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("digest mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &body[header_end..];
        let mut params = BTreeMap::new();
        for entry in header.arrays {
            let end = entry.offset + entry.nbytes;
            if end > payload.len() {
                return Err(Error::Format(format!("array '{}' out of range", entry.name)));
            }
            let raw = &payload[entry.offset..end];
            let count: usize = entry.shape.iter().product();
            if count * entry.dtype.size() != entry.nbytes {
                return Err(Error::Format(format!("array '{}' size mismatch", entry.name)));
            }
            let values = match entry.dtype {
                DType::F32 => Values::F32(f32::read_le(raw)),
                DType::F64 => Values::F64(f64::read_le(raw)),
            };
            params.insert(
                entry.name,
                Array {
                    shape: entry.shape,
                    values,
                },
            );
        }
        Ok(Self {
            params,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage_name: "test".into(),
            seed: 1,
            config_digest: "abc".into(),
            created_at: "0".into(),
            extra: serde_json::json!({"k": 1}),
        }
    }

    #[test]
    fn two_by_two_round_trip() {
        let mut c = Checkpoint::new(meta());
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        c.insert("w", &t);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.bit_eq(&c));
        assert!(back.tensor::<f32>("w").unwrap().bit_eq(&t));
    }

    #[test]
    fn flipped_byte_is_integrity_error() {
        let mut c = Checkpoint::new(meta());
        c.insert("w", &Tensor::<f64>::full(&[3], 0.5));
        let mut bytes = c.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn digest_tracks_every_field() {
        #[derive(Serialize)]
        struct Cfg {
            a: u32,
            b: f64,
        }
        let d0 = config_digest(&Cfg { a: 1, b: 0.5 });
        assert_eq!(d0, config_digest(&Cfg { a: 1, b: 0.5 }));
        assert_ne!(d0, config_digest(&Cfg { a: 2, b: 0.5 }));
        assert_ne!(d0, config_digest(&Cfg { a: 1, b: 0.25 }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(9, "ck");
        let mut c = Checkpoint::new(meta());
        c.insert("a", &Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng));
        c.insert("b", &Tensor::<f64>::randn(&[7], 1.0, &mut rng));
        let path = dir.path().join("sub/model.ckpt");
        save_checkpoint(&c, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&c));
    }
}
