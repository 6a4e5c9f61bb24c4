//! Little-endian binary parameter checkpoints.
//!
//! ```text
//! magic     8 bytes  "CANKD\0\0\x01"
//! count     u32
//! per tensor:
//!   name_len u16, name (UTF-8), rank u8, extents u32 x rank, values f64 x numel
//! crc       u64      CRC-64/XZ of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use cankd_core::{ParamStore64, Tensor64};
use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"CANKD\0\0\x01";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("unsupported checkpoint magic {found:02x?}")]
    VersionMismatch { found: Vec<u8> },
    #[error("cannot encode tensor {name}: {reason}")]
    Encode { name: String, reason: String },
}

fn format_err(offset: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { offset, reason: reason.into() }
}

pub fn encode(params: &ParamStore64) -> Result<Vec<u8>, CheckpointError> {
    let count = u32::try_from(params.len())
        .map_err(|_| CheckpointError::Encode { name: String::new(), reason: "too many tensors".into() })?;
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let encode_err = |reason: &str| CheckpointError::Encode { name: name.to_string(), reason: reason.into() };
        let len = u16::try_from(name.len()).map_err(|_| encode_err("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.dims().len()).map_err(|_| encode_err("rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| encode_err("extent above u32::MAX"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore64, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(format_err(bytes.len(), "truncated magic"));
        }
        return Err(CheckpointError::VersionMismatch { found: bytes.to_vec() });
    }
    if bytes[..8] != MAGIC {
        return Err(CheckpointError::VersionMismatch { found: bytes[..8].to_vec() });
    }
    // The body ends before the trailing checksum; parse it against that bound
    // so truncation is reported where the data runs out.
    let body_len = bytes.len().checked_sub(8).filter(|&n| n >= 12).ok_or_else(|| format_err(bytes.len(), "truncated header"))?;
    let mut cur = Cursor { buf: &bytes[..body_len], pos: 8 };
    let count = u32::from_le_bytes(cur.array("tensor count")?);
    let mut store = ParamStore64::new();
    for _ in 0..count {
        let name_at = cur.pos;
        let len = u16::from_le_bytes(cur.array("name length")?) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| format_err(name_at + 2, "name is not UTF-8"))?
            .to_string();
        if store.contains(&name) {
            return Err(format_err(name_at, format!("duplicate tensor {name}")));
        }
        let rank = cur.array::<1>("rank")?[0] as usize;
        let dims_at = cur.pos;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(cur.array("extent")?) as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && rank > 0)
            .ok_or_else(|| format_err(dims_at, format!("invalid extents {dims:?}")))?;
        let raw = cur.take(numel.checked_mul(8).ok_or_else(|| format_err(dims_at, "tensor too large"))?, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor64::from_vec(dims, data).map_err(|e| format_err(dims_at, e.to_string()))?;
        store.insert(name, tensor);
    }
    if cur.pos != body_len {
        return Err(format_err(cur.pos, format!("{} unexpected bytes after the last tensor", body_len - cur.pos)));
    }
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
    let computed = CRC64.checksum(&bytes[..body_len]);
    if stored != computed {
        return Err(format_err(body_len, format!("checksum mismatch: stored {stored:016x}, computed {computed:016x}")));
    }
    Ok(store)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(params: &ParamStore64, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore64, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Overwrites the tensors of `params` with those stored at `path`.
///
/// The file must hold exactly the same names and shapes; `params` is left
/// untouched on any error.
pub fn restore_into(params: &mut ParamStore64, path: &Path) -> Result<(), CheckpointError> {
    let loaded = load_checkpoint(path)?;
    let mismatch = |reason: String| format_err(0, reason);
    if loaded.len() != params.len() {
        return Err(mismatch(format!("expected {} tensors, found {}", params.len(), loaded.len())));
    }
    for (name, t) in params.iter() {
        let other = loaded.get(name).map_err(|_| mismatch(format!("missing tensor {name}")))?;
        if other.dims() != t.dims() {
            return Err(mismatch(format!("{name}: expected {}, found {}", t.shape(), other.shape())));
        }
    }
    for (name, t) in loaded.iter() {
        *params.get_mut(name).expect("checked above") = t.clone();
    }
    Ok(())
}
