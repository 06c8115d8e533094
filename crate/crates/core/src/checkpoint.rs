//! Binary checkpoint format.
//!
//! ```text
//! b"SCDN" | u32 version (=1) | u32 n | n bytes of UNetConfig JSON
//! per parameter, in layout order:
//!     u32 name_len | name bytes | u32 rank | rank x u32 dims | f64 LE values
//! ```
//! All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{ModelParams, Param, UNetConfig};

pub const MAGIC: &[u8; 4] = b"SCDN";
pub const VERSION: u32 = 1;

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        if count > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("truncated payload for `{name}`")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::new(shape, data)?))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    for p in &params.params {
        put_tensor(&mut buf, &p.name, &p.value);
    }
    buf
}

/// Parses a checkpoint. With `expected` set, the stored config must match it.
pub fn decode(bytes: &[u8], expected: Option<&UNetConfig>) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).map_err(|_| Error::Checkpoint("file too short for magic".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected \"SCDN\")".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: UNetConfig = serde_json::from_slice(r.bytes(n)?)
        .map_err(|e| Error::Checkpoint(format!("config JSON: {e}")))?;
    config.validate()?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(Error::ConfigMismatch(format!("checkpoint has {config:?}, expected {exp:?}")));
        }
    }
    let mut params = Vec::new();
    for (name, shape, kind) in config.layout() {
        let (got_name, value) = r.tensor()?;
        if got_name != name {
            return Err(Error::Checkpoint(format!("expected parameter `{name}`, found `{got_name}`")));
        }
        if value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", value.shape())));
        }
        params.push(Param { name, kind, value });
    }
    r.finish()?;
    Ok(ModelParams { config, params })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&UNetConfig>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}
