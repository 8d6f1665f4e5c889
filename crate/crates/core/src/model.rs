//! The full network: one shared encoder plus the four heads.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadParams};
use crate::linalg::{Mat, Scalar};
use crate::rng::child_seed;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        let heads = HeadConfig::for_hidden(encoder.hidden);
        Self { encoder, heads }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.heads.hidden != self.encoder.hidden || self.heads.ffn_hidden == 0 {
            return Err(Error::Config(format!(
                "head width {} must match encoder hidden size {}",
                self.heads.hidden, self.encoder.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub heads: HeadParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { encoder: EncoderParams::zeros(&cfg.encoder), heads: HeadParams::zeros(&cfg.heads) }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: init_params(&cfg.encoder, child_seed(seed, 0))?,
            heads: HeadParams::init(&cfg.heads, child_seed(seed, 1)),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = self.encoder.tensors();
        out.extend(self.heads.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(cfg);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn fill(&mut self, value: T) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }
}

/// Trained parameters together with everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match vocabulary of {} tokens",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, vocab, params })
    }
}
