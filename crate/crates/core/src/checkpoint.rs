//! Binary checkpoint format.
//!
//! ```text
//! "FQVW"  u32 version
//! u32 n  n bytes of compact JSON {"config": .., "seed": ..}
//! u32 parameter count, then per parameter:
//!     u32 name length, UTF-8 name, u32 ndims, ndims × u32 dims, f32 payload
//! u8 optimizer flag; if 1: u64 step, then m and v payloads in parameter order
//! ```
//!
//! Every integer and float is little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"FQVW";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Seed the model was initialised from.
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&OptimizerState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            seed: model.seed(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model; every stored name and shape must match the architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.seed)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                model.params().len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.params {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("parameter `{name}` appears twice")));
            }
            model.params_mut().set(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            seed: self.seed,
        })
        .expect("config serialises");
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    put_f32s(&mut out, t.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut read = |shape: &[usize]| -> Result<Tensor> {
                    Tensor::from_vec(shape, r.f32s(shape.iter().product())?)
                };
                let m = params.iter().map(|(_, t)| read(t.shape())).collect::<Result<Vec<_>>>()?;
                let v = params.iter().map(|(_, t)| read(t.shape())).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config: meta.config,
            seed: meta.seed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn trained_looking(seed: u64) -> Model {
        let mut m = Model::new(&ModelConfig::tiny(), seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut().iter_mut() {
            p.tensor = Tensor::random(p.tensor.shape(), &mut rng);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained_looking(3);
        let mut opt = OptimizerState::new(m.params());
        opt.step = 17;
        opt.m[2].data_mut()[0] = f32::MIN_POSITIVE;
        let ck = Checkpoint::from_model(&m, Some(&opt));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in rebuilt.params().iter().zip(m.params().iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
    }

    #[test]
    fn header_layout() {
        let m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let bytes = Checkpoint::from_model(&m, None).to_bytes();
        assert_eq!(&bytes[..4], b"FQVW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(meta["seed"], 0);
        assert_eq!(meta["config"]["base_channels"], 8);
        assert_eq!(*bytes.last().unwrap(), 0);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let bytes = Checkpoint::from_model(&m, None).to_bytes();
        for bad in [&bytes[..bytes.len() - 5], &b"NOPE\x01\0\0\0"[..]] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_rejected_on_rebuild() {
        let m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let mut ck = Checkpoint::from_model(&m, None);
        ck.params[0].1 = Tensor::zeros(&[1]);
        assert!(ck.to_model().is_err());
        ck.params.pop();
        assert!(ck.to_model().is_err());
    }
}
