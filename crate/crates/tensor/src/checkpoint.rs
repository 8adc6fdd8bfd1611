//! Binary checkpoint format.
//!
//! ```text
//! "CKV2"  u16 version  u32 count
//! count × { u32 name_len, name (UTF-8), u8 rank, rank × u32 dim, numel × f32 }
//! ```
//! All integers and floats are little-endian. Values are stored as `f32`;
//! loading widens to `f64`, so a load→save cycle reproduces the bytes.

use std::path::Path;

use thiserror::Error;

use crate::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CKV2";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("invalid record `{name}` at byte {offset}: {msg}")]
    Record {
        name: String,
        offset: usize,
        msg: String,
    },
    #[error("{} trailing bytes after last record", .0)]
    Trailing(usize),
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let records = store
            .iter()
            .map(|(name, t, _)| Record {
                name: name.to_string(),
                dims: t.shape().iter().map(|&d| d as u32).collect(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self { records }
    }

    /// Overwrites values in `store`; every store entry must be present with
    /// a matching shape. Extra records are ignored.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let rec = self
                .records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let t = store.get_mut(&name).expect("name from store");
            let dims: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
            if dims != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: dims,
                    expected: t.shape().to_vec(),
                });
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&rec.data) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let r = self.records.iter().find(|r| r.name == name)?;
        let dims: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(&dims, r.data.iter().map(|&v| f64::from(v)).collect()).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = rd.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let offset = rd.pos;
            let len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(len)?.to_vec()).map_err(|e| {
                CheckpointError::Record {
                    name: String::new(),
                    offset,
                    msg: e.to_string(),
                }
            })?;
            let rank = rd.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(rd.u32()?);
            }
            if rank == 0 || dims.contains(&0) {
                return Err(CheckpointError::Record {
                    name,
                    offset,
                    msg: format!("invalid dims {dims:?}"),
                });
            }
            let numel = dims.iter().map(|&d| d as usize).product::<usize>();
            let raw = rd.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, dims, data });
        }
        if rd.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - rd.pos));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
