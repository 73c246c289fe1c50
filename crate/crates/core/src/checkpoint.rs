//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "QSNNCKPT"
//! version      u32
//! architecture u32 length + UTF-8 bytes
//! tensors      u32 count, then per tensor:
//!                u32 name length + UTF-8 name
//!                u32 rank, rank × u32 extents
//!                numel × f32 payload
//! scalars      u32 count, then per scalar:
//!                u32 name length + UTF-8 name, u64 value
//! ```
//!
//! Tensor payloads are single precision; training keeps every persisted
//! quantity f32-representable so a save → load → save cycle is byte-identical.
//! Floating scalars are stored as their `f64` bit pattern.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QSNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: String,
    pub tensors: Vec<(String, Tensor)>,
    pub scalars: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn new(architecture: impl Into<String>) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            architecture: architecture.into(),
            tensors: vec![],
            scalars: vec![],
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) {
        self.scalars.push((name.into(), v));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, v: f64) {
        self.scalars.push((name.into(), v.to_bits()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn u64(&self, name: &str) -> Option<u64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn f64(&self, name: &str) -> Option<f64> {
        self.u64(name).map(f64::from_bits)
    }

    pub fn require_u64(&self, name: &str) -> Result<u64> {
        self.u64(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar `{name}`")))
    }

    pub fn require_f64(&self, name: &str) -> Result<f64> {
        self.require_u64(name).map(f64::from_bits)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn expect_architecture(&self, architecture: &str) -> Result<()> {
        if self.architecture != architecture {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture `{}` does not match `{architecture}`",
                self.architecture
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.architecture);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a complete checkpoint; nothing is returned unless every section
    /// decodes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let architecture = r.string()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1 << 16));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let n_scalars = r.u32()? as usize;
        let mut scalars = Vec::with_capacity(n_scalars.min(1 << 16));
        for _ in 0..n_scalars {
            let name = r.string()?;
            let v = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            scalars.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            architecture,
            tensors,
            scalars,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 name".into()))
    }
}
