//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSEG"            4 bytes magic
//! version           u32 (currently 1)
//! count             u32
//! count × record:
//!   name_len        u32
//!   name            name_len bytes, UTF-8
//!   dtype           u8   (0 = f64, 1 = f32)
//!   ndim            u32
//!   dims            ndim × u64
//!   frozen          u8   (0 or 1)
//!   data            Π dims × scalar, little-endian
//! checksum          u32  CRC-32 of every preceding byte
//! ```
//!
//! Loading checks the magic first, then the checksum, then the version, so a
//! truncated file is reported as a checksum failure.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nn::ParamRegistry;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TSEG";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[cfg(not(feature = "f32"))]
const NATIVE_DTYPE: u8 = DTYPE_F64;
#[cfg(feature = "f32")]
const NATIVE_DTYPE: u8 = DTYPE_F32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),

    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode(params: &ParamRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(NATIVE_DTYPE);
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(p.frozen as u8);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Malformed {
                offset: self.pos,
                msg: format!("unexpected end of data reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bad(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            offset: self.pos,
            msg: msg.into(),
        }
    }
}

/// Parses a checkpoint. Values stored with a different dtype than the build's
/// `Scalar` are converted.
pub fn decode(bytes: &[u8]) -> Result<ParamRegistry> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 8 {
        return Err(CheckpointError::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("parameter count")?;
    let mut reg = ParamRegistry::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.bad("parameter name is not UTF-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let width = match dtype {
            DTYPE_F64 => 8,
            DTYPE_F32 => 4,
            d => return Err(r.bad(format!("unknown dtype code {d}"))),
        };
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(width).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| r.bad(format!("implausible shape {shape:?} for `{name}`")))?;
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            f => return Err(r.bad(format!("frozen flag must be 0 or 1, got {f}"))),
        };
        let raw = r.take(n * width, "tensor data")?;
        let data: Vec<Scalar> = if width == 8 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar).collect()
        };
        let t = Tensor::new(&shape, data).map_err(|e| r.bad(e.to_string()))?;
        reg.register(name, t, frozen).map_err(|e| r.bad(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(r.bad(format!("{} trailing bytes after last record", body.len() - r.pos)));
    }
    Ok(reg)
}

pub fn save_checkpoint(params: &ParamRegistry, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamRegistry> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
