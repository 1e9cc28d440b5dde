//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DIFFCKPT" | version u32 | count u32
//! per entry: name_len u32 | name utf-8 | dtype u8 (0 = f32, 1 = f64)
//!            | rank u32 | dims u64 × rank | values (little-endian)
//! ```

use std::path::Path;

use crate::error::{DiffError, Result};
use crate::real::{DType, Real};
use crate::registry::ParameterRegistry;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"DIFFCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(params: &ParameterRegistry<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.put_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DiffError::Checkpoint {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn fail<X>(&self, reason: impl Into<String>) -> Result<X> {
        Err(DiffError::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        })
    }
}

/// Decodes a container, converting stored values to `T` when the dtypes differ.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParameterRegistry<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(DiffError::Checkpoint {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("entry count")?;
    let mut params = ParameterRegistry::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("name is not utf-8"),
        };
        let tag = r.take(1, "dtype")?[0];
        let Some(dtype) = DType::from_tag(tag) else {
            return r.fail(format!("unknown dtype tag {tag}"));
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n = numel(&shape);
        let raw = r.take(n * dtype.size(), "values")?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks(4).map(|c| T::of(f32::get_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| T::of(f64::get_le(c))).collect(),
        };
        if params.get(&name).is_ok() {
            return r.fail(format!("duplicate entry `{name}`"));
        }
        params.register(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes");
    }
    Ok(params)
}

pub fn save<T: Real>(params: &ParameterRegistry<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ParameterRegistry<T>> {
    decode(&std::fs::read(path)?)
}
