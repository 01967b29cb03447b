//! Checkpoint container: named tensors in a single file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DGZ1"                      4 bytes magic
//! version                     u8, currently 1
//! tensor count                u32
//! per tensor:
//!   name length               u16
//!   name                      UTF-8 bytes
//!   rank                      u8 (<= 4)
//!   dims                      rank x u32
//!   payload                   product(dims) x f32
//! footer                      u32 CRC32 (IEEE) of every preceding byte
//! ```
//!
//! The format is normative for cross-language interchange, so the CRC32 is
//! implemented here rather than pulled in: reflected polynomial
//! `0xEDB88320`, init and final xor `0xFFFFFFFF` (check vector
//! `"123456789"` -> `0xCBF43926`).
//!
//! Tensors round-trip bit-exactly. Non-tensor state (config text, epoch
//! counters, Adam step counts) is stored as tensors too: text as one f32
//! per byte, counters as scalars — see [`Checkpoint::insert_text`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGZ1";
pub const VERSION: u8 = 1;

/// IEEE CRC32 (reflected 0xEDB88320), bitwise, no table: speed is
/// irrelevant next to training and the loop doubles as documentation.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Ordered named tensors; order is preserved through save/load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// UTF-8 text as a rank-1 tensor, one byte per element.
    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
        let len = data.len();
        self.insert(
            name,
            Tensor::from_vec(&[len.max(1)], if len == 0 { vec![0.0] } else { data })
                .expect("rank-1 text tensor"),
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Decodes a tensor stored by [`Checkpoint::insert_text`].
    pub fn text(&self, name: &str) -> Result<String> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing text entry `{name}`")))?;
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    Err(Error::Checkpoint(format!("entry `{name}` is not byte text")))
                } else {
                    Ok(v as u8)
                }
            })
            .collect::<Result<_>>()?;
        let s = String::from_utf8(bytes)
            .map_err(|e| Error::Checkpoint(format!("entry `{name}` is not UTF-8: {e}")))?;
        Ok(s.trim_end_matches('\0').to_string())
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.tensors.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("name `{name}` too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).expect("rank <= 4");
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("dim {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let need = |have: usize, want: usize, what: &str| -> Result<()> {
            if have < want {
                return Err(Error::Checkpoint(format!(
                    "truncated file: {what} needs {want} bytes, {have} remain"
                )));
            }
            Ok(())
        };
        need(bytes.len(), MAGIC.len() + 1 + 4 + 4, "header and footer")?;
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4.min(bytes.len())],
                MAGIC
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}, expected {VERSION}",
                bytes[4]
            )));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: footer {stored:#010x}, computed {actual:#010x}"
            )));
        }
        let body = &bytes[..body_len];
        let mut pos = 5usize;
        let count = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            need(body_len - pos, 2, "name length")?;
            let name_len =
                u16::from_le_bytes(body[pos..pos + 2].try_into().expect("2 bytes")) as usize;
            pos += 2;
            need(body_len - pos, name_len, "name")?;
            let name = std::str::from_utf8(&body[pos..pos + name_len])
                .map_err(|e| Error::Checkpoint(format!("tensor {i} name is not UTF-8: {e}")))?
                .to_string();
            pos += name_len;
            need(body_len - pos, 1, "rank")?;
            let rank = body[pos] as usize;
            pos += 1;
            if rank > 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has rank {rank} > 4"
                )));
            }
            need(body_len - pos, 4 * rank, "dims")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes")) as usize,
                );
                pos += 4;
            }
            let numel: usize = shape.iter().product();
            need(body_len - pos, 4 * numel, "payload")?;
            let data: Vec<f32> = body[pos..pos + 4 * numel]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * numel;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if pos != body_len {
            return Err(Error::Checkpoint(format!(
                "expected {body_len} body bytes, tensor data ends at {pos}"
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
