//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "VSDCKPT\0"
//! version          u32
//! config hash      u32 length + UTF-8 bytes
//! config record    u32 length + UTF-8 bytes (model configuration as JSON)
//! parameter count  u32
//! per parameter:   u32 name length + name, u32 rank, u64 dims[rank], f64 values
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, VsdError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_json: String,
    pub params: ParamStore,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(config_hash: &str, config_json: &str, params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.num_values() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, config_hash);
    put_str(&mut buf, config_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        put_str(&mut buf, &p.name);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VsdError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| VsdError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(VsdError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(VsdError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let config_hash = r.string()?;
    let config_json = r.string()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(VsdError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_hash,
        config_json,
        params,
    })
}

pub fn write_checkpoint(
    path: &Path,
    config_hash: &str,
    config_json: &str,
    params: &ParamStore,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config_hash, config_json, params))
        .map_err(|e| VsdError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| VsdError::io(path, e))?;
    decode_checkpoint(&bytes)
}
