//! The `MSEQA1` checkpoint container.
//!
//! ```text
//! "MSEQA1"
//! u32 header length, header JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u32 dims.., f32 data (row-major)
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments, when
//! present, are stored as extra tensors prefixed `adam.m.` and `adam.v.`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 6] = b"MSEQA1";

/// Where a training run stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// Epochs fully completed.
    pub epoch: usize,
    /// Optimizer updates applied.
    pub step: u64,
    pub total_steps: u64,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default)]
    pub run_config: serde_json::Value,
    #[serde(default)]
    pub progress: Option<Progress>,
}

/// First and second moment estimates for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub run_config: serde_json::Value,
    pub progress: Option<Progress>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self { model, run_config: serde_json::Value::Null, progress: None, moments: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            vocab_hash: self.model.vocab.hash(),
            vocab: self.model.vocab.tokens().to_vec(),
            run_config: self.run_config.clone(),
            progress: self.progress.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header always serialises");
        let mut tensors: Vec<(String, &Mat<f32>)> = self.model.params.tensors();
        if let Some(moments) = &self.moments {
            tensors.extend(moments.m.tensors().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            tensors.extend(moments.v.tensors().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, tensors.len());
        for (name, t) in tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, 2);
            put_u32(&mut out, t.rows);
            put_u32(&mut out, t.cols);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("missing MSEQA1 magic".into()));
        }
        let header_len = r.u32()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        if vocab.hash() != header.vocab_hash {
            return Err(Error::Compatibility(format!(
                "vocabulary hash {} does not match the header's {}",
                vocab.hash(),
                header.vocab_hash
            )));
        }
        let config = header.model;
        config.validate()?;
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Compatibility(format!(
                "encoder expects {} tokens but the vocabulary has {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }

        let mut stored = std::collections::BTreeMap::new();
        for _ in 0..r.u32()? {
            let name_len = r.u32()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let count: usize = dims.iter().product();
            let data: Vec<f32> = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if stored.insert(name.clone(), (dims, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let params = fill(ModelParams::zeros(&config), "", &mut stored)?;
        let moments = if stored.keys().any(|k| k.starts_with("adam.")) {
            Some(Moments {
                m: fill(ModelParams::zeros(&config), "adam.m.", &mut stored)?,
                v: fill(ModelParams::zeros(&config), "adam.v.", &mut stored)?,
            })
        } else {
            None
        };
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            model: Model { config, vocab, params },
            run_config: header.run_config,
            progress: header.progress,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

type Stored = std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn fill(mut params: ModelParams<f32>, prefix: &str, stored: &mut Stored) -> Result<ModelParams<f32>> {
    for (name, t) in params.tensors_mut() {
        let key = format!("{prefix}{name}");
        let (dims, data) = stored
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if dims != [t.rows, t.cols] {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has shape {dims:?}, expected [{}, {}]",
                t.rows, t.cols
            )));
        }
        t.data = data;
    }
    Ok(params)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> Model {
        let tokens = ["[CLS]", "[SEP]", "[PAD]", "[UNK]", "bob", "kitchen"];
        let vocab = Vocab::from_tokens(tokens.iter().map(|s| s.to_string()).collect()).unwrap();
        let cfg = ModelConfig::new(EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            max_positions: 32,
            vocab_size: vocab.len(),
            dropout_rate: 0.1,
        });
        Model::new(cfg, vocab, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ckpt = Checkpoint::from_model(model());
        ckpt.run_config = serde_json::json!({"version": 1});
        ckpt.progress = Some(Progress {
            epoch: 2,
            step: 40,
            total_steps: 200,
            best_val_loss: Some(1.25),
            best_epoch: Some(1),
        });
        let mut m = ckpt.model.params.clone();
        m.scale(-0.5);
        ckpt.moments = Some(Moments { m: m.clone(), v: m });
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..6], b"MSEQA1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn special_float_values_survive() {
        let mut ckpt = Checkpoint::from_model(model());
        ckpt.model.params.heads.multispan_bias.data = vec![-0.0, f32::MIN_POSITIVE / 2.0];
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let bits: Vec<u32> = back.model.params.heads.multispan_bias.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, vec![(-0.0f32).to_bits(), (f32::MIN_POSITIVE / 2.0).to_bits()]);
    }

    #[test]
    fn tampered_vocab_hash_is_a_compatibility_error() {
        let bytes = Checkpoint::from_model(model()).to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("\"vocab_hash\":\"").unwrap() + 14;
        let mut bad = bytes.clone();
        bad[at] = if bad[at] == b'0' { b'1' } else { b'0' };
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Compatibility(_))));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let bytes = Checkpoint::from_model(model()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOTMSE"), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
