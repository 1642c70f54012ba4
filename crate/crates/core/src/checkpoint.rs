//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HDIT" | version: u32 | count: u32
//! count × { name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | dims: rank × u64 | offset: u64 }
//! payloads, each the raw little-endian elements of one tensor; offsets are
//! relative to the start of the payload section
//! ```
//!
//! Training state is stored under name prefixes: `raw/` model weights,
//! `ema/` averaged weights, `adam_m/` and `adam_v/` optimizer moments, and
//! `meta/` scalars (stored as one-element binary64 tensors).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{DType, Element, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"HDIT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name}: stored as {stored:?} {stored_dtype}, expected {expected:?} {expected_dtype}")]
    Mismatch {
        name: String,
        stored: Vec<usize>,
        stored_dtype: DType,
        expected: Vec<usize>,
        expected_dtype: DType,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

/// An ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<E: Element>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let name = name.into();
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            dtype: E::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        });
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, &Tensor::<f64>::scalar(v));
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Reads a tensor; the stored dtype must match `E`.
    pub fn get<E: Element>(&self, name: &str) -> Result<Tensor<E>> {
        let e = self.entry(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        if e.dtype != E::DTYPE {
            return Err(CheckpointError::Mismatch {
                name: name.into(),
                stored: e.shape.clone(),
                stored_dtype: e.dtype,
                expected: e.shape.clone(),
                expected_dtype: E::DTYPE,
            });
        }
        let data: Vec<E> = e.payload.chunks(E::DTYPE.size_of()).map(E::read_le).collect();
        Ok(Tensor::from_vec(data, &e.shape)?)
    }

    /// Reads a tensor that must have the given shape.
    pub fn get_shaped<E: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<E>> {
        let t = self.get::<E>(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::Mismatch {
                name: name.into(),
                stored: t.shape().to_vec(),
                stored_dtype: E::DTYPE,
                expected: shape.to_vec(),
                expected_dtype: E::DTYPE,
            });
        }
        Ok(t)
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get::<f64>(name)?.item())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.payload.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| CheckpointError::Corrupt(format!("needed {n} bytes at {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = u32_at(take(4)?) as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| CheckpointError::Corrupt("name is not utf-8".into()))?;
            let code = take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("dtype code {code}")))?;
            let rank = u32_at(take(4)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_at(take(8)?) as usize);
            }
            let offset = u64_at(take(8)?) as usize;
            manifest.push((name, dtype, shape, offset));
        }
        let base = pos;
        let mut entries = Vec::with_capacity(count);
        for (name, dtype, shape, offset) in manifest {
            let len = shape.iter().product::<usize>() * dtype.size_of();
            let payload = bytes
                .get(base + offset..base + offset + len)
                .ok_or_else(|| CheckpointError::Corrupt(format!("payload of {name} out of bounds")))?
                .to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        Ok(Checkpoint { entries })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut c = Checkpoint::new();
        let a = Tensor::<f32>::from_vec(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e-38], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![std::f64::consts::PI], &[1]).unwrap();
        c.insert("raw/a", &a);
        c.insert("raw/b", &b);
        c.insert_scalar("meta/step", 12345.0);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let a2 = back.get::<f32>("raw/a").unwrap();
        assert_eq!(
            a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.get_scalar("meta/step").unwrap(), 12345.0);
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(&bytes[..4], b"HDIT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut c = Checkpoint::new();
        c.insert("x", &Tensor::<f32>::zeros(&[3]));
        let bytes = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(c.get::<f64>("x"), Err(CheckpointError::Mismatch { .. })));
        assert!(matches!(c.get_shaped::<f32>("x", &[4]), Err(CheckpointError::Mismatch { .. })));
        assert!(matches!(c.get::<f32>("y"), Err(CheckpointError::Missing(_))));
    }
}
