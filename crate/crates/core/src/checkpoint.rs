//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `GPXCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header listing tensor names and shapes (plus free-form
//! metadata), then every tensor as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GPXCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|e| {
                Error::Checkpoint(format!("tensor {} truncated: {e}", entry.name))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            tensors.push((entry.name, Tensor::new(&entry.shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self { tensors, metadata: header.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
