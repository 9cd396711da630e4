//! Checkpoint container: a JSON header describing the model followed by
//! named little-endian `f64` tensors.
//!
//! Layout: magic `MITC`, format version (u32 LE), header length (u32 LE),
//! UTF-8 JSON header, then the tensor payloads in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};

const MAGIC: &[u8; 4] = b"MITC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<(String, usize)>,
}

/// An in-memory checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"ccnn"`.
    pub kind: String,
    /// Full model configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) {
        self.tensors.push((name.into(), values.to_vec()));
    }

    /// Stores every parameter value under `prefix.index`.
    pub fn push_params(&mut self, prefix: &str, params: &[&Param]) {
        for (i, p) in params.iter().enumerate() {
            self.push(format!("{prefix}.{i}"), &p.value);
        }
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {name:?}")))
    }

    /// Restores parameters written by [`Checkpoint::push_params`].
    pub fn load_params(&self, prefix: &str, params: &mut [&mut Param]) -> Result<()> {
        for (i, p) in params.iter_mut().enumerate() {
            let v = self.get(&format!("{prefix}.{i}"))?;
            if v.len() != p.len() {
                return Err(Error::shape(p.len(), v.len()));
            }
            p.value.copy_from_slice(v);
        }
        Ok(())
    }

    /// Stores parameters and buffers of a module under `prefix`.
    pub fn push_module(&mut self, prefix: &str, m: &dyn Module) {
        self.push_params(prefix, &m.params());
        for (i, b) in m.buffers().iter().enumerate() {
            self.push(format!("{prefix}.buf{i}"), b);
        }
    }

    pub fn load_module(&self, prefix: &str, m: &mut dyn Module) -> Result<()> {
        self.load_params(prefix, &mut m.params_mut())?;
        for (i, b) in m.buffers_mut().into_iter().enumerate() {
            let v = self.get(&format!("{prefix}.buf{i}"))?;
            if v.len() != b.len() {
                return Err(Error::shape(b.len(), v.len()));
            }
            b.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("not a checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(json).map_err(|e| e.to_string())?;
        let mut pos = 12 + hlen;
        let mut tensors = Vec::new();
        for (name, len) in header.tensors {
            let raw = bytes.get(pos..pos + 8 * len).ok_or("truncated payload")?;
            pos += 8 * len;
            let v = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, v));
        }
        if pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new("test", &serde_json::json!({"width": 3})).unwrap();
        c.push("a", &[1.0, -0.1, f64::MIN_POSITIVE]);
        c.push("b", &[]);
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("a").unwrap()[1].to_bits(), (-0.1f64).to_bits());
        assert!(back.get("c").is_err());
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint::new("test", &1).unwrap();
        let mut bytes = c.encode();
        bytes.push(0);
        assert!(Checkpoint::decode(&bytes).is_err());
        assert!(Checkpoint::decode(b"XXXX").is_err());
    }
}
