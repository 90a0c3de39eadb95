use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tokenizer::NUM_SPECIAL;
use crate::{Error, Result};

/// How a source's ensemble of head probabilities is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Min,
    Max,
    Mean,
}

impl Pooling {
    pub fn apply(self, probs: &[f64]) -> f64 {
        match self {
            Pooling::Min => probs.iter().copied().fold(f64::INFINITY, f64::min),
            Pooling::Max => probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Pooling::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
        }
    }
}

/// Architecture hyperparameters. Serialized with the single-letter names
/// `V E H C I L F` used throughout the parameter accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "E")]
    pub embed_dim: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "C")]
    pub attn_dim: usize,
    #[serde(rename = "I")]
    pub inter_dim: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub heads: usize,
    #[serde(rename = "F")]
    pub ffn_dim: usize,
    pub max_len: usize,
    pub factorize_vocab: bool,
    pub factorize_attention: bool,
    pub factorize_feedforward: bool,
    pub factorize_output: bool,
    pub sources: Vec<String>,
    pub heads_per_source: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    /// The 7.1M-parameter reference configuration with every factorization on.
    pub fn reference() -> Self {
        ModelConfig {
            vocab_size: 40_000,
            embed_dim: 128,
            hidden: 384,
            attn_dim: 192,
            inter_dim: 128,
            layers: 6,
            heads: 6,
            ffn_dim: 4 * 384,
            max_len: 128,
            factorize_vocab: true,
            factorize_attention: true,
            factorize_feedforward: true,
            factorize_output: true,
            sources: vec!["news".into(), "finance".into()],
            heads_per_source: 2,
            pooling: Pooling::Min,
        }
    }

    /// Small fully factorized model for CPU-scale experiments.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 64,
            attn_dim: 32,
            inter_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_len: 64,
            ..Self::reference()
        }
    }

    pub fn with_factorizations(mut self, vocab: bool, attention: bool, ff: bool, output: bool) -> Self {
        self.factorize_vocab = vocab;
        self.factorize_attention = attention;
        self.factorize_feedforward = ff;
        self.factorize_output = output;
        self
    }

    /// Width of the query/key/value space.
    pub fn attention_inner(&self) -> usize {
        if self.factorize_attention {
            self.attn_dim
        } else {
            self.hidden
        }
    }

    pub fn head_dim(&self) -> usize {
        self.attention_inner() / self.heads
    }

    pub fn source_index(&self, source: &str) -> Option<usize> {
        self.sources.iter().position(|s| s == source)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.vocab_size <= NUM_SPECIAL as usize {
            return fail("V", format!("{} leaves no room past the special tokens", self.vocab_size));
        }
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return fail("H", format!("{} must be a positive multiple of 4", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("heads", format!("{} does not divide H = {}", self.heads, self.hidden));
        }
        if self.factorize_attention {
            if self.attn_dim == 0 || self.attn_dim % 4 != 0 {
                return fail("C", format!("{} must be a positive multiple of 4", self.attn_dim));
            }
            if self.attn_dim % self.heads != 0 {
                return fail("heads", format!("{} does not divide C = {}", self.heads, self.attn_dim));
            }
        }
        if self.factorize_vocab && (self.embed_dim == 0 || self.embed_dim % 4 != 0) {
            return fail("E", format!("{} must be a positive multiple of 4", self.embed_dim));
        }
        if (self.factorize_feedforward || self.factorize_output)
            && (self.inter_dim == 0 || self.inter_dim % 4 != 0)
        {
            return fail("I", format!("{} must be a positive multiple of 4", self.inter_dim));
        }
        if self.ffn_dim != 4 * self.hidden {
            return fail("F", format!("{} must equal 4H = {}", self.ffn_dim, 4 * self.hidden));
        }
        if self.max_len < 3 {
            return fail("max_len", format!("{} is too short for [CLS] x [SEP]", self.max_len));
        }
        if self.heads_per_source == 0 {
            return fail("heads_per_source", "must be at least 1".into());
        }
        if self.sources.is_empty() {
            return fail("sources", "at least one source tag is required".into());
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].contains(s) {
                return fail("sources", format!("duplicate tag {s:?}"));
            }
        }
        Ok(())
    }
}
