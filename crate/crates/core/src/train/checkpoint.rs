//! Binary checkpoint: magic `MPCK`, version, length-prefixed JSON header,
//! name table, tensor payload, trailing CRC32 of everything before it.
//! All integers little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{AdamConfig, AdamState, Precision, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"MPCK";
pub const CKPT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

/// Everything needed to evaluate or continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    /// Sampler generator seed and word position.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    adam_config: AdamConfig,
    adam_step: u64,
    rng_seed: [u8; 32],
    /// Decimal string; JSON numbers cannot carry 128 bits.
    rng_word_pos: String,
}

struct Entry<'a> {
    name: String,
    tensor: &'a Tensor,
}

impl Checkpoint {
    /// Fresh checkpoint around initialized parameters.
    pub fn new(model: ModelConfig, train: TrainConfig, params: ModelParams) -> Self {
        let adam = AdamState::new(train.adam(), params.leaves().into_iter().map(|(_, t)| t));
        Checkpoint { model, train, params, adam, step: 0, rng_seed: [0; 32], rng_word_pos: 0 }
    }

    fn entries(&self) -> Vec<Entry<'_>> {
        let leaves = self.params.leaves();
        let mut out: Vec<Entry> = leaves.iter().map(|(n, t)| Entry { name: n.clone(), tensor: *t }).collect();
        for (i, (n, _)) in leaves.iter().enumerate() {
            out.push(Entry { name: format!("{FIRST_MOMENT}{n}"), tensor: &self.adam.first_moment[i] });
        }
        for (i, (n, _)) in leaves.iter().enumerate() {
            out.push(Entry { name: format!("{SECOND_MOMENT}{n}"), tensor: &self.adam.second_moment[i] });
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            adam_config: self.adam.config,
            adam_step: self.adam.step_count,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
        };
        let text = serde_json::to_string(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let entries = self.entries();
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.tensor.precision().tag());
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &x in e.tensor.shape() {
                out.extend_from_slice(&(x as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (e.tensor.len() * e.tensor.precision().byte_width()) as u64;
        }
        for e in &entries {
            match e.tensor.precision() {
                Precision::Single => {
                    e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()))
                }
                Precision::Double => e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic { expected: CKPT_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Version { found: version, expected: CKPT_VERSION });
        }
        let text_len = r.u32()? as usize;
        let text_off = r.pos;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|e| Error::Format { offset: text_off, msg: format!("header is not UTF-8: {e}") })?;
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Format { offset: text_off, msg: format!("header JSON: {e}") })?;

        struct Raw {
            name: String,
            precision: Precision,
            shape: Vec<usize>,
            offset: u64,
        }
        let count = r.u32()? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::NameTable { offset: at, msg: "name is not UTF-8".into() })?
                .to_string();
            let tag = r.u8()?;
            let precision = Precision::from_tag(tag)
                .ok_or_else(|| Error::NameTable { offset: at, msg: format!("unknown dtype tag {tag} for {name}") })?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::NameTable { offset: at, msg: format!("rank {rank} for {name}") });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            if offset != expected_offset {
                return Err(Error::NameTable {
                    offset: at,
                    msg: format!("{name}: payload offset {offset}, expected {expected_offset}"),
                });
            }
            let n: usize = shape.iter().product();
            expected_offset += (n * precision.byte_width()) as u64;
            raw.push(Raw { name, precision, shape, offset });
        }
        let payload_len = expected_offset as usize;
        let payload_start = r.pos;
        if r.remaining() < payload_len + 4 {
            return Err(Error::Truncated { offset: payload_start, needed: payload_len + 4, len: bytes.len() });
        }
        if r.remaining() > payload_len + 4 {
            return Err(Error::Format {
                offset: payload_start + payload_len + 4,
                msg: format!("{} trailing bytes", r.remaining() - payload_len - 4),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }

        let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(raw.len());
        for e in raw {
            let start = payload_start + e.offset as usize;
            let n: usize = e.shape.iter().product();
            let chunk = &bytes[start..start + n * e.precision.byte_width()];
            let data: Vec<f64> = match e.precision {
                Precision::Single => {
                    chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
                }
                Precision::Double => chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let t = Tensor::with_precision(&e.shape, data, e.precision)
                .map_err(|err| Error::NameTable { offset: start, msg: format!("{}: {err}", e.name) })?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::NameTable { offset: start, msg: format!("duplicate tensor {}", e.name) });
            }
        }

        header.model.validate()?;
        let template = crate::model::shapes(&header.model);
        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| Error::NameTable { offset: 0, msg: format!("missing tensor {name}") })
        };
        let mut missing: Option<Error> = None;
        let params = template.map(&mut |name, _| match take(&name) {
            Ok(t) => t,
            Err(e) => {
                missing.get_or_insert(e);
                Tensor::scalar(0.0)
            }
        });
        let names = template.names();
        let mut first = Vec::with_capacity(names.len());
        let mut second = Vec::with_capacity(names.len());
        for n in &names {
            match (take(&format!("{FIRST_MOMENT}{n}")), take(&format!("{SECOND_MOMENT}{n}"))) {
                (Ok(m), Ok(v)) => {
                    first.push(m);
                    second.push(v);
                }
                (Err(e), _) | (_, Err(e)) => {
                    missing.get_or_insert(e);
                }
            }
        }
        if let Some(e) = missing {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::NameTable { offset: 0, msg: format!("unexpected tensor {extra}") });
        }
        params.check_shapes(&header.model).map_err(|e| Error::NameTable { offset: 0, msg: e.to_string() })?;
        let rng_word_pos = header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format { offset: text_off, msg: "rng_word_pos is not an integer".into() })?;
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            params,
            adam: AdamState {
                config: header.adam_config,
                step_count: header.adam_step,
                first_moment: first,
                second_moment: second,
            },
            step: header.step,
            rng_seed: header.rng_seed,
            rng_word_pos,
        })
    }

    /// Fails with a config-conflict error when the stored model
    /// configuration differs from `requested`.
    pub fn ensure_model(&self, requested: &ModelConfig) -> Result<()> {
        match self.model.describe_conflict(requested) {
            None => Ok(()),
            Some(diff) => Err(Error::ConfigConflict(diff)),
        }
    }
}

pub fn write_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::gradcheck();
        let mut c = Checkpoint::new(
            cfg.clone(),
            TrainConfig { seed: 3, ..Default::default() },
            ModelParams::init(&cfg, 1).unwrap(),
        );
        c.adam.first_moment[2].data_mut()[0] = 0.1 + 1e-17;
        c.adam.step_count = 7;
        c.step = 12;
        c.rng_seed[5] = 9;
        c.rng_word_pos = u128::MAX - 3;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut tampered = bytes.clone();
        let at = bytes.len() - 40;
        tampered[at] ^= 0x20;
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Crc { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(Error::Truncated { .. })));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn bad_dtype_tag_is_a_name_table_error() {
        let bytes = sample().to_bytes().unwrap();
        let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + text_len + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        let mut v = bytes.clone();
        v[first + 4 + name_len] = 7;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::NameTable { .. })));
    }

    #[test]
    fn conflicting_config_is_reported() {
        let c = sample();
        let other = ModelConfig { n_routed: 6, ..c.model.clone() };
        assert!(matches!(c.ensure_model(&other), Err(Error::ConfigConflict(_))));
        assert!(c.ensure_model(&c.model.clone()).is_ok());
    }
}
