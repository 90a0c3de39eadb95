//! Parameter inventory and parameter counting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 0.02²)`.
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Weight {
    Dense(usize),
    Quat([usize; 4]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: Weight,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub shift: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIndex {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: Norm,
    /// One dense map, or the two stages of a quaternion pair.
    pub up: Vec<Linear>,
    pub down: Vec<Linear>,
    pub ffn_norm: Norm,
}

/// Positions of every parameter group inside the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Index {
    pub token: usize,
    pub token_up: Option<Linear>,
    pub position: usize,
    pub segment: usize,
    pub emb_norm: Norm,
    pub layers: Vec<LayerIndex>,
    pub mlm: Linear,
    pub nsp: Linear,
    pub classifiers: Vec<Linear>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn bias(&mut self, name: &str, out: usize, bias: bool) -> Option<usize> {
        bias.then(|| self.add(format!("{name}.bias"), vec![out], Init::Zeros))
    }

    fn dense(&mut self, name: &str, input: usize, out: usize, bias: bool) -> Linear {
        let w = self.add(format!("{name}.weight"), vec![input, out], Init::Normal);
        Linear {
            weight: Weight::Dense(w),
            bias: self.bias(name, out, bias),
        }
    }

    fn quat(&mut self, name: &str, input: usize, out: usize, bias: bool) -> Linear {
        let w = ["r", "i", "j", "k"]
            .map(|c| self.add(format!("{name}.weight.{c}"), vec![input / 4, out / 4], Init::Normal));
        Linear {
            weight: Weight::Quat(w),
            bias: self.bias(name, out, bias),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), vec![dim], Init::Ones),
            shift: self.add(format!("{name}.shift"), vec![dim], Init::Zeros),
        }
    }
}

pub(crate) fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Index) {
    let h = cfg.hidden;
    let mut b = Builder { specs: Vec::new() };
    let (token, token_up) = if cfg.factorize_vocab {
        let t = b.add("embeddings.token".into(), vec![cfg.vocab_size, cfg.embed_dim], Init::Normal);
        (t, Some(b.quat("embeddings.token_up", cfg.embed_dim, h, false)))
    } else {
        (b.add("embeddings.token".into(), vec![cfg.vocab_size, h], Init::Normal), None)
    };
    let position = b.add("embeddings.position".into(), vec![cfg.max_len, h], Init::Normal);
    let segment = b.add("embeddings.segment".into(), vec![2, h], Init::Normal);
    let emb_norm = b.norm("embeddings.norm", h);

    let inner = cfg.attention_inner();
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("layers.{l}");
            let mut qkv = |w: &str| {
                let name = format!("{p}.attn.{w}");
                if cfg.factorize_attention {
                    b.quat(&name, h, inner, true)
                } else {
                    b.dense(&name, h, h, true)
                }
            };
            let (query, key, value) = (qkv("query"), qkv("key"), qkv("value"));
            let output = b.dense(&format!("{p}.attn.output"), inner, h, true);
            let attn_norm = b.norm(&format!("{p}.attn.norm"), h);
            let up = if cfg.factorize_feedforward {
                vec![
                    b.quat(&format!("{p}.ffn.up.0"), h, cfg.inter_dim, true),
                    b.quat(&format!("{p}.ffn.up.1"), cfg.inter_dim, cfg.ffn_dim, true),
                ]
            } else {
                vec![b.dense(&format!("{p}.ffn.up"), h, cfg.ffn_dim, true)]
            };
            let down = if cfg.factorize_output {
                vec![
                    b.quat(&format!("{p}.ffn.down.0"), cfg.ffn_dim, cfg.inter_dim, true),
                    b.quat(&format!("{p}.ffn.down.1"), cfg.inter_dim, h, true),
                ]
            } else {
                vec![b.dense(&format!("{p}.ffn.down"), cfg.ffn_dim, h, true)]
            };
            let ffn_norm = b.norm(&format!("{p}.ffn.norm"), h);
            LayerIndex {
                query,
                key,
                value,
                output,
                attn_norm,
                up,
                down,
                ffn_norm,
            }
        })
        .collect();

    let mlm = b.dense("mlm.decoder", h, cfg.vocab_size, true);
    let nsp = b.dense("nsp", h, 1, true);
    let classifiers = cfg
        .sources
        .iter()
        .map(|s| b.dense(&format!("classifier.{s}"), h, cfg.heads_per_source, true))
        .collect();
    let index = Index {
        token,
        token_up,
        position,
        segment,
        emb_norm,
        layers,
        mlm,
        nsp,
        classifiers,
    };
    (b.specs, index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Weight matrices of the embedding and encoder stack only, following
    /// the closed-form accounting (attention output kept at `H²`).
    Formula,
    /// Every trainable scalar the built model holds.
    Exact,
}

pub fn count_params(cfg: &ModelConfig, mode: CountMode) -> u64 {
    match mode {
        CountMode::Formula => formula_count(cfg),
        CountMode::Exact => layout(cfg).0.iter().map(|s| s.numel() as u64).sum(),
    }
}

fn formula_count(cfg: &ModelConfig) -> u64 {
    let [v, e, h, c, i, l] = [
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.hidden,
        cfg.attn_dim,
        cfg.inter_dim,
        cfg.layers,
    ]
    .map(|x| x as u64);
    let vocab = if cfg.factorize_vocab { v * e + e * h / 4 } else { v * h };
    let qkv = if cfg.factorize_attention { 3 * c * h / 4 } else { 3 * h * h };
    let up = if cfg.factorize_feedforward { h * i / 4 + i * h } else { 4 * h * h };
    let down = if cfg.factorize_output { h * i + i * h / 4 } else { 4 * h * h };
    vocab + l * (qkv + h * h + up + down)
}
