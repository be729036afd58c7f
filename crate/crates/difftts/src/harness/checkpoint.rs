//! Binary checkpoint container for named f64 arrays.
//!
//! Layout (all integers little-endian):
//!   magic "GTTS2" (5 bytes)
//!   format version u32 (currently 1)
//!   count u32
//!   per array:
//!     name length u32, name bytes (UTF-8)
//!     dtype tag u8 (0x01 = f64)
//!     rank u8
//!     dims, u64 each
//!     payload, numel × f64 little-endian
//!   crc32 u32 over everything before it
//!
//! Loading restores arrays bit-identically; a failing CRC, truncation,
//! duplicate names, or an unsupported version are errors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"GTTS2";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0x01;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("duplicate array name '{0}'")]
    DuplicateName(String),
    #[error("invalid utf-8 in array name")]
    BadName,
    #[error("unsupported dtype tag {0:#x}")]
    BadDtype(u8),
    #[error("non-finite value in array '{0}'")]
    NonFinite(String),
}

/// Incremental CRC32 (IEEE 802.3, reflected).
pub struct Crc32 {
    state: u32,
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc32 {
    pub fn new() -> Crc32 {
        Crc32 { state: 0xffff_ffff }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            let mut cur = (self.state ^ b as u32) & 0xff;
            for _ in 0..8 {
                cur = if cur & 1 != 0 {
                    0xedb8_8320 ^ (cur >> 1)
                } else {
                    cur >> 1
                };
            }
            self.state = cur ^ (self.state >> 8);
        }
    }

    pub fn finish(&self) -> u32 {
        self.state ^ 0xffff_ffff
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = Crc32::new();
    c.update(bytes);
    c.finish()
}

/// Serializes named arrays to the checkpoint byte format.
pub fn to_bytes(arrays: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, tensor) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Parses checkpoint bytes back into named arrays.
pub fn from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(CheckpointError::Truncated);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            data.push(v);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        if out.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(CheckpointError::DuplicateName(name));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated);
    }
    Ok(out)
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save(path: &Path, arrays: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    let bytes = to_bytes(arrays);
    super::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Convenience used by tests and the experiment driver.
pub fn save_writer<W: Write>(mut w: W, arrays: &BTreeMap<String, Tensor>) -> std::io::Result<()> {
    w.write_all(&to_bytes(arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};

    fn sample_arrays() -> BTreeMap<String, Tensor> {
        let mut rng = Rng::new(42).substream("ckpt");
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), randn(&[3, 4], &mut rng));
        m.insert("a.b".to_string(), randn(&[4], &mut rng));
        m.insert("scalar".to_string(), Tensor::scalar(7.25));
        m
    }

    #[test]
    fn round_trip_bitwise() {
        let arrays = sample_arrays();
        let restored = from_bytes(&to_bytes(&arrays)).unwrap();
        assert_eq!(restored.len(), arrays.len());
        for (name, t) in &arrays {
            assert!(restored[name].bit_eq(t), "array {name}");
        }
    }

    #[test]
    fn corrupted_payload_detected() {
        let arrays = sample_arrays();
        let mut bytes = to_bytes(&arrays);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn truncation_detected() {
        let arrays = sample_arrays();
        let bytes = to_bytes(&arrays);
        let cut = &bytes[..bytes.len() - 9];
        assert!(from_bytes(cut).is_err());
    }

    #[test]
    fn empty_set_valid() {
        let empty = BTreeMap::new();
        let restored = from_bytes(&to_bytes(&empty)).unwrap();
        assert!(restored.is_empty());
    }

    #[test]
    fn version_checked() {
        let arrays = sample_arrays();
        let mut bytes = to_bytes(&arrays);
        // Bump the version field and fix up the CRC.
        bytes[5] = 9;
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn crc_known_value() {
        // CRC32("123456789") = 0xcbf43926, the standard check value.
        assert_eq!(crc32(b"123456789"), 0xcbf43926);
    }
}
