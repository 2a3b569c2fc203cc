//! Named-tensor checkpoint container (`MWQC`).
//!
//! ```text
//! file   := "MWQC" u16:version(=1) record*          (records run to end of file)
//! record := u16:name_len name u8:dtype(0 = f32) u8:ndim u32:dim*ndim f32*numel
//! ```
//!
//! Integers and floats are little-endian. Record order is preserved.

use std::fs;
use std::path::Path;

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MWQC";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| MwqError::format("checkpoint", format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| MwqError::Config(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(
                u8::try_from(t.ndim()).map_err(|_| MwqError::Config("too many dimensions".into()))?,
            );
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| MwqError::Config("extent exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |reason: String| MwqError::format("checkpoint", reason);
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let mut pos = 6;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(err(format!("truncated record at byte {pos}")));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let mut ckpt = Checkpoint::new();
        // A record boundary exactly at the end of data terminates the file.
        while let Ok(head) = take(2) {
            let name_len = u16::from_le_bytes([head[0], head[1]]) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| err("tensor name is not UTF-8".into()))?;
            let meta = take(2)?;
            if meta[0] != DTYPE_F32 {
                return Err(err(format!("tensor `{name}` has unsupported dtype {}", meta[0])));
            }
            let ndim = meta[1] as usize;
            let shape = take(4 * ndim)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .collect::<Vec<_>>();
            let numel: usize = shape.iter().product();
            let data = take(4 * numel)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if ckpt.get(&name).is_some() {
                return Err(err(format!("duplicate tensor `{name}`")));
            }
            let tensor = Tensor::from_vec(&shape, data)?;
            ckpt.entries.push((name, tensor));
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
