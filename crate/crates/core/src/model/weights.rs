// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named f32 tensors, the `CLMW` weight file, and model identity.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "CLMW" | u32 version=1 | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u64 dims[rank] | f32 data[prod(dims)]
//! ```
//!
//! Every matrix is stored `[in, out]` and applied to row vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, PositionalScheme};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CLMW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.dims[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = self.dims[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Element `(r, c)` of a rank-2 tensor.
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        let cols = self.dims[1];
        &mut self.data[r * cols + c]
    }

    /// Column `c` of a rank-2 tensor, copied out.
    pub fn column(&self, c: usize) -> Vec<f32> {
        let cols = self.dims[1];
        (0..self.dims[0]).map(|r| self.data[r * cols + c]).collect()
    }
}

/// SHA-256 over the canonical config text and every tensor (name, dims, bytes)
/// in name order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelId(#[serde(with = "hex_bytes")] pub [u8; 32]);

impl ModelId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Other(format!("bad model id: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Other("model id must be 32 bytes".into()))?;
        Ok(Self(arr))
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelId({})", self.short())
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("model id must be 32 bytes"))
    }
}

/// Names and shapes every model with `config` must carry.
pub fn expected_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let f = config.ffn_dim();
    let v = config.vocab_size;
    let mut schema = vec![("tok_embeddings".to_string(), vec![v, h])];
    if config.positional_scheme == PositionalScheme::LearnedAbsolute {
        schema.push(("pos_embeddings".to_string(), vec![config.max_seq_len, h]));
    }
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        schema.push((p("attn_norm"), vec![h]));
        for m in ["wq", "wk", "wv", "wo"] {
            schema.push((p(m), vec![h, h]));
        }
        schema.push((p("ffn_norm"), vec![h]));
        schema.push((p("w_gate"), vec![h, f]));
        schema.push((p("w_up"), vec![h, f]));
        schema.push((p("w_down"), vec![f, h]));
    }
    schema.push(("norm".to_string(), vec![h]));
    schema.push(("output".to_string(), vec![h, v]));
    schema
}

/// The full parameter set of one model, keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// All-zero weights with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = expected_schema(config)
            .into_iter()
            .map(|(name, dims)| {
                let t = if dims.len() == 1 {
                    Tensor::filled(&dims, 1.0)
                } else {
                    Tensor::zeros(&dims)
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    /// Gaussian-initialised weights, fully determined by `seed`.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = expected_schema(config)
            .into_iter()
            .map(|(name, dims)| {
                let t = if dims.len() == 1 {
                    Tensor::filled(&dims, 1.0)
                } else {
                    let std = if name.ends_with("embeddings") {
                        1.0
                    } else {
                        1.0 / (dims[0] as f32).sqrt()
                    };
                    let normal = Normal::new(0.0f32, std).expect("finite std");
                    Tensor {
                        data: (0..dims.iter().product::<usize>())
                            .map(|_| normal.sample(&mut rng))
                            .collect(),
                        dims,
                    }
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Lookup for a tensor already guaranteed present by [`validate`](Self::validate).
    pub(crate) fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let schema = expected_schema(config);
        for (name, dims) in &schema {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if &t.dims != dims {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: t.dims.clone(),
                });
            }
            if t.data.len() != dims.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: vec![t.data.len()],
                });
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !schema.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    pub fn model_id(&self, config: &ModelConfig) -> ModelId {
        let mut hasher = Sha256::new();
        hasher.update(config.to_config_string().as_bytes());
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.dims.len() as u64).to_le_bytes());
            for d in &t.dims {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in &t.data {
                hasher.update(x.to_le_bytes());
            }
        }
        ModelId(hasher.finalize().into())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::CorruptHeader("bad magic, expected CLMW".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::CorruptHeader(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| Error::CorruptHeader(format!("{name}: dim overflow")))?,
                );
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::CorruptHeader(format!("{name}: size overflow")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors
                .insert(name.clone(), Tensor { dims, data })
                .is_some()
            {
                return Err(Error::CorruptHeader(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            vocab_size: 16,
            max_seq_len: 8,
            norm_epsilon: 1e-5,
            positional_scheme: PositionalScheme::LearnedAbsolute,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let w = ModelWeights::random(&config(), 3);
        let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        back.validate(&config()).unwrap();
    }

    #[test]
    fn model_id_depends_on_every_byte() {
        let c = config();
        let w = ModelWeights::random(&c, 3);
        let mut w2 = w.clone();
        w2.get_mut("layers.1.wv").unwrap().data[5] += 1.0;
        assert_ne!(w.model_id(&c), w2.model_id(&c));
        assert_eq!(w.model_id(&c), w.clone().model_id(&c));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let w = ModelWeights::random(&config(), 1);
        let mut bytes = w.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(Error::CorruptHeader(_))
        ));
        let bytes = w.to_bytes();
        assert!(matches!(
            ModelWeights::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptHeader(_))
        ));
        let mut bytes = w.to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn missing_and_extra_tensors() {
        let c = config();
        let mut tensors: BTreeMap<_, _> = ModelWeights::zeros(&c)
            .tensors()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        tensors.remove("norm");
        let err = ModelWeights::from_tensors(tensors.clone())
            .validate(&c)
            .unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "norm"));
        tensors.insert("norm".into(), Tensor::zeros(&[8]));
        tensors.insert("bogus".into(), Tensor::zeros(&[1]));
        let err = ModelWeights::from_tensors(tensors)
            .validate(&c)
            .unwrap_err();
        assert!(matches!(err, Error::UnexpectedTensor(_)));
    }
}
