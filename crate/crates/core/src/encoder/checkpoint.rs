//! Checkpoint container: the magic line `SPFG1\n`, one line of JSON header,
//! then little-endian `f32` payloads at the header's byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: &[u8] = b"SPFG1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += t.numel() * 4;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header)?);
        out.push(b'\n');
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing SPFG1 magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        let payload = &rest[nl + 1..];
        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "{}: unexpected offset {}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            params,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add(
            "a",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
        );
        params.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        Checkpoint {
            kind: "test".into(),
            config: json!({"hidden": 4}),
            meta: json!({"seed": 1}),
            params,
        }
    }

    #[test]
    fn layout() {
        let bytes = sample().to_bytes().unwrap();
        assert!(bytes.starts_with(b"SPFG1\n{"));
        let nl = 6 + bytes[6..].iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 7 * 4);
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
