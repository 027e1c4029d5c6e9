//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "RESADAPT"
//! version    u32
//! n_header   u32, then n_header × (u32 length, UTF-8 "key=value")
//! n_tensors  u32, then n_tensors × (u32 name length, UTF-8 name,
//!                                   u32 rank, rank × u64 dims,
//!                                   product(dims) × f64 payload)
//! ```
//!
//! All integers and floats are little-endian; payloads are raw IEEE-754 bits,
//! so a load/save cycle is byte-identical.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{format_err, Result};
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

pub const MAGIC: &[u8; 8] = b"RESADAPT";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered header records plus named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: IndexMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err("checkpoint header", format!("missing key {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| format_err("checkpoint header", format!("bad value for {key}: {v}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (k, v) in &self.header {
            let rec = format!("{k}={v}");
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err("checkpoint", format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let rec = r.str(len)?;
            let (k, v) = rec
                .split_once('=')
                .ok_or_else(|| format_err("checkpoint header", rec.to_string()))?;
            ck.header.insert(k.to_string(), v.to_string());
        }
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let name = r.str(len)?.to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err("checkpoint", "size"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(format_err("checkpoint", "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| format_err("checkpoint", e.to_string()))
    }
}

/// Hash binding adapter bundles to base models they can attach to.
pub fn config_hash(config: &ModelConfig) -> String {
    let canon = format!("d_model={};num_layers={}", config.d_model, config.num_layers);
    Sha256::digest(canon.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes the model configuration into header records.
pub fn write_model_config(ck: &mut Checkpoint, c: &ModelConfig) {
    ck.set("num_layers", c.num_layers);
    ck.set("d_model", c.d_model);
    ck.set("d_ff", c.d_ff);
    ck.set("num_heads", c.num_heads);
    ck.set("vocab_size", c.vocab_size);
    ck.set("max_len", c.max_len);
    ck.set("dropout", c.dropout);
    ck.set("config_hash", config_hash(c));
}

pub fn read_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let c = ModelConfig {
        num_layers: ck.parse("num_layers")?,
        d_model: ck.parse("d_model")?,
        d_ff: ck.parse("d_ff")?,
        num_heads: ck.parse("num_heads")?,
        vocab_size: ck.parse("vocab_size")?,
        max_len: ck.parse("max_len")?,
        dropout: ck.parse("dropout")?,
    };
    c.validate()?;
    Ok(c)
}
