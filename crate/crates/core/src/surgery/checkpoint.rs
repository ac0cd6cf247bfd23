//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "ENCT5CK\0"
//! version      u32      FORMAT_VERSION
//! seed         u64      seed used for fresh parameters
//! config_len   u32
//! config       config_len bytes of TOML (ModelConfig)
//! entry_count  u32
//! entry_count × {
//!     name_len u16, name (UTF-8),
//!     dtype u8 (1 = f64, 2 = f32), rank u8, rank × u64 dims,
//!     offset u64, nbytes u64
//! }
//! blob_len     u64
//! blob         blob_len bytes; entries laid out back to back in manifest order
//! ```
//!
//! Entries are sorted by name, so a store always serializes to the same bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{canonical_shapes, ModelConfig, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ENCT5CK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 1,
    F32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F64),
            2 => Ok(DType::F32),
            t => Err(Error::Malformed(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParameterStore,
}

impl Checkpoint {
    /// Wraps `params` after checking them against `config`.
    pub fn new(config: ModelConfig, seed: u64, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Checkpoint { config, seed, params })
    }

    /// Freshly initialized checkpoint.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&config, seed);
        Checkpoint::new(config, seed, params)
    }

    pub fn manifest(&self, dtype: DType) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.params
            .iter()
            .map(|(name, t)| {
                let nbytes = (t.numel() * dtype.size()) as u64;
                let e = ManifestEntry {
                    name: name.to_string(),
                    dtype,
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with(DType::F64)
    }

    /// Serializes with every tensor stored as `dtype`. `F32` rounds values.
    pub fn to_bytes_with(&self, dtype: DType) -> Vec<u8> {
        let config = self.config.to_toml_string();
        let manifest = self.manifest(dtype);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        for e in &manifest {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.nbytes.to_le_bytes());
        }
        let blob_len: u64 = manifest.iter().map(|e| e.nbytes).sum();
        out.extend_from_slice(&blob_len.to_le_bytes());
        for (_, t) in self.params.iter() {
            for &x in t.data() {
                match dtype {
                    DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let seed = r.u64()?;
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?).map_err(|e| Error::Malformed(e.to_string()))?;
        let config = ModelConfig::from_toml_str(config)?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Malformed(e.to_string()))?
                .to_string();
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let nbytes = r.u64()?;
            manifest.push(ManifestEntry {
                name,
                dtype,
                shape,
                offset,
                nbytes,
            });
        }
        let blob_len = r.u64()?;
        let blob = &bytes[r.at..];
        if (blob.len() as u64) < blob_len {
            return Err(Error::TruncatedBlob {
                expected: blob_len,
                found: blob.len() as u64,
            });
        }
        if blob.len() as u64 != blob_len {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the blob",
                blob.len() as u64 - blob_len
            )));
        }

        let want = canonical_shapes(&config);
        let mut params = ParameterStore::new();
        let mut next = 0u64;
        for e in &manifest {
            match want.get(&e.name) {
                None => return Err(Error::UnexpectedParameter(e.name.clone())),
                Some(s) if *s != e.shape => {
                    return Err(Error::CheckpointShape {
                        name: e.name.clone(),
                        expected: s.clone(),
                        found: e.shape.clone(),
                    })
                }
                Some(_) => {}
            }
            let numel: usize = e.shape.iter().product();
            if e.offset != next || e.nbytes != (numel * e.dtype.size()) as u64 {
                return Err(Error::Malformed(format!(
                    "entry `{}` has inconsistent offset or size",
                    e.name
                )));
            }
            next += e.nbytes;
            let raw = &blob[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if params
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Malformed(format!("duplicate entry `{}`", e.name)));
            }
        }
        if next != blob_len {
            return Err(Error::Malformed("entry sizes do not sum to the blob length".into()));
        }
        Checkpoint::new(config, seed, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Malformed(format!("header ends early at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
