//! `XFCK` checkpoint files.
//!
//! ```text
//! "XFCK" | version u32 | count u32 |
//!   count × { name_len u16 | name | rank u8 | extents u32×rank | dtype u8 | payload }
//! | crc32 u32
//! ```
//!
//! All integers and payloads are little-endian. The CRC covers every byte
//! between the magic and the CRC itself.

use std::path::Path;

use xfmamba::params::ParamStore;
use xfmamba::tensor::DType;
use xfmamba::{Real, Tensor};

use crate::error::{CliError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"XFCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.push(T::DTYPE as u8);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into named tensors of precision `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, String> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..4] != MAGIC {
        return Err("not an XFCK checkpoint".into());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(&body[MAGIC.len()..]) != stored {
        return Err("CRC mismatch".into());
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| format!("tensor {i}: name is not UTF-8"))?;
        let rank = c.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let tag = c.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("{name}: unknown dtype {tag}"))?;
        if dtype != T::DTYPE {
            return Err(format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or("extent overflow")?;
        let raw = c.take(n.checked_mul(dtype.size_of()).ok_or("extent overflow")?, "payload")?;
        let data: Vec<T> = raw.chunks_exact(dtype.size_of()).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name.to_string(), t));
    }
    if c.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - c.pos));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fsio::write_atomic(path, &encode(store))
}

/// Loads a checkpoint into `store`, which must hold exactly the same names
/// and shapes.
pub fn load_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let tensors = decode::<T>(&fsio::read(path)?).map_err(|d| CliError::format(path, d))?;
    if tensors.len() != store.len() {
        return Err(CliError::Usage(format!(
            "{}: holds {} tensors, the configured model has {}",
            path.display(),
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store
            .set(&name, t)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
