//! `NLM1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NLM1" | u32 version | u32 header_len | header (UTF-8 JSON)
//! | zero padding to a 64-byte boundary | tensor data
//! ```
//!
//! The header is `{"kind": .., "meta": .., "tensors": [{"name", "shape",
//! "offset"}]}`. Offsets are relative to the start of the data section and
//! are multiples of 64; each tensor is raw little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nano::{NanoConfig, NanoWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NLM1";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

pub const KIND_NANO: &str = "nano-weights";
pub const KIND_PREDICTOR: &str = "predictor";
pub const KIND_LABELS: &str = "predictor-labels";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset = align_up(offset + t.len() * 4);
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::CorruptCheckpoint("header too large".into()))?;
        let mut buf = Vec::with_capacity(align_up(12 + header.len()) + offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&header_len.to_le_bytes());
        buf.extend_from_slice(&header);
        buf.resize(align_up(buf.len()), 0);
        let data_start = buf.len();
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.resize(data_start + align_up(buf.len() - data_start), 0);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::CorruptCheckpoint(format!(
                "file is {} bytes, shorter than the fixed preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::CorruptCheckpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let data_start = align_up(12 + header_len);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let begin = data_start + entry.offset;
            let raw = bytes.get(begin..begin + n * 4).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("tensor `{}` extends past end of file", entry.name))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn nano_to_container(config: &NanoConfig, weights: &NanoWeights) -> Result<Container> {
    weights.check_shapes(config)?;
    let mut c = Container::new(KIND_NANO, serde_json::to_value(config)?);
    for (name, t, _) in weights.named(config) {
        c.push(name, t.clone());
    }
    Ok(c)
}

pub fn nano_from_container(mut c: Container) -> Result<(NanoConfig, NanoWeights)> {
    c.expect_kind(KIND_NANO)?;
    let config: NanoConfig = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad config header: {e}")))?;
    config.validate()?;
    let mut weights = NanoWeights::zeros(&config);
    let expected = NanoWeights::expected_shapes(&config);
    for ((name, shape), slot) in expected.into_iter().zip(weights.tensors_mut()) {
        let t = c.take(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        *slot = t;
    }
    if let Some((extra, _)) = c.tensors.first() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok((config, weights))
}

pub fn save_checkpoint(
    weights: &NanoWeights,
    config: &NanoConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    nano_to_container(config, weights)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NanoConfig, NanoWeights)> {
    nano_from_container(Container::load(path)?)
}

pub(crate) fn check_kind(c: &Container, kind: &str) -> Result<()> {
    c.expect_kind(kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> (NanoConfig, NanoWeights) {
        let cfg = NanoConfig::tiny();
        let w = NanoWeights::random(&cfg, &mut Rng::new(21)).unwrap();
        (cfg, w)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, w) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nlm");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let (cfg2, w2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a, _), (_, b, _)) in w.named(&cfg).iter().zip(w2.named(&cfg2).iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let bytes = std::fs::read(&path).unwrap();
        save_checkpoint(&w2, &cfg2, &path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn layout_is_aligned() {
        let (cfg, w) = sample();
        let bytes = nano_to_container(&cfg, &w).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NLM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        let data_start = align_up(12 + hl);
        assert_eq!(data_start % 64, 0);
        let first = &header["tensors"][0];
        assert_eq!(first["name"], "tok_emb");
        let off = first["offset"].as_u64().unwrap() as usize;
        let v = f32::from_le_bytes(bytes[data_start + off..data_start + off + 4].try_into().unwrap());
        assert_eq!(v.to_bits(), w.tok_emb.data()[0].to_bits());
        for t in header["tensors"].as_array().unwrap() {
            assert_eq!(t["offset"].as_u64().unwrap() % 64, 0);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (cfg, w) = sample();
        let bytes = nano_to_container(&cfg, &w).unwrap().to_bytes().unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
            assert!(err.to_string().contains("corrupt checkpoint"));
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (cfg, w) = sample();
        let mut bytes = nano_to_container(&cfg, &w).unwrap().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn shape_disagreement_names_tensor() {
        let (cfg, w) = sample();
        let mut c = nano_to_container(&cfg, &w).unwrap();
        let idx = c.tensors.iter().position(|(n, _)| n == "layers.2.w1").unwrap();
        c.tensors[idx].1 = Tensor::zeros(&[3, 3]);
        let err = nano_from_container(Container::from_bytes(&c.to_bytes().unwrap()).unwrap())
            .unwrap_err();
        match err {
            Error::ShapeMismatch { name, .. } => assert_eq!(name, "layers.2.w1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let c = Container::new(KIND_PREDICTOR, serde_json::json!({}));
        assert!(nano_from_container(c).is_err());
    }
}
