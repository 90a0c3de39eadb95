//! Quaternion-factorized transformer encoder with pretraining heads and the
//! multi-source ensemble classifier.

mod config;
mod layout;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{ModelConfig, Pooling};
pub use layout::{count_params, CountMode, Init, ParamSpec};
use layout::{Index, Linear, Norm, Weight};

use crate::dataprep::FinetuneExample;
use crate::rng::{self, derive_seed};
use crate::tensor::{Reduce, Tape, Tensor, Var};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Additive score for padded keys.
pub const MASK_OFFSET: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    index: Index,
}

impl Model {
    /// Fresh weights: `N(0, 0.02²)` for every weight, zero biases and
    /// shifts, unit gains. Each parameter draws from its own seeded stream.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, index) = layout::layout(&config);
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.numel();
                let data = match s.init {
                    Init::Normal => {
                        let mut r = rng::seeded(derive_seed(seed, i as u64));
                        rng::normal_vec(&mut r, n, INIT_STD)
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(s.shape.clone(), data).map(Tensor::trainable)
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            config,
            specs,
            params,
            index,
        })
    }

    /// Assembles a model from named tensors, e.g. a loaded checkpoint.
    /// Every parameter of `config` must be present with its exact shape.
    pub fn from_tensors(config: ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, index) = layout::layout(&config);
        if named.len() != specs.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors for this configuration, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let pos = named.iter().position(|(n, _)| *n == spec.name).ok_or_else(|| {
                Error::Incompatible(format!("tensor {} is missing", spec.name))
            })?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "tensor {}: stored shape {:?}, configuration expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            params.push(t.trainable());
        }
        Ok(Model {
            config,
            specs,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(|i| &mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// A forward-pass recorder. With `trainable` off, gradients flow only
    /// into leaves the caller marks explicitly.
    pub fn session(&self, trainable: bool) -> Session<'_> {
        Session {
            model: self,
            tape: Tape::new(),
            vars: vec![None; self.params.len()],
            trainable,
            record_attention: false,
            attention: Vec::new(),
        }
    }

    /// Hidden states `n × H` without gradient tracking.
    pub fn encode(&self, token_ids: &[u32], segment_ids: &[u8], mask: Option<&[bool]>) -> Result<Tensor> {
        let mut s = self.session(false);
        let h = s.encoder(token_ids, segment_ids, mask)?;
        Ok(s.tape.value(h).clone())
    }

    /// `P(y = 1 | text, source)`.
    pub fn predict(&self, ex: &FinetuneExample) -> Result<f64> {
        let mut s = self.session(false);
        let p = s.classify_example(ex)?;
        Ok(s.tape.data(p)[0])
    }
}

/// Records one or more forward passes of a model on a single tape.
/// Parameters are bound lazily, so unused heads never enter the graph.
pub struct Session<'m> {
    model: &'m Model,
    pub tape: Tape,
    vars: Vec<Option<Var>>,
    trainable: bool,
    record_attention: bool,
    attention: Vec<Var>,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Keep per-head attention weights (`n × n`, layer-major) for inspection.
    pub fn record_attention(&mut self, on: bool) {
        self.record_attention = on;
    }

    pub fn attention_weights(&self) -> &[Var] {
        &self.attention
    }

    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let mut t = self.model.params[i].clone();
        t.set_requires_grad(self.trainable);
        let v = self.tape.leaf(t);
        self.vars[i] = Some(v);
        v
    }

    pub fn param_var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    /// Gradients per parameter after `tape.backward`; `None` for parameters
    /// the loss never touched.
    pub fn take_param_grads(&mut self) -> Vec<Option<Vec<f64>>> {
        let vars = self.vars.clone();
        vars.into_iter()
            .map(|v| v.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }

    fn linear(&mut self, lin: Linear, x: Var) -> Result<Var> {
        let y = match lin.weight {
            Weight::Dense(w) => {
                let w = self.param(w);
                self.tape.matmul(x, w)?
            }
            Weight::Quat(ws) => {
                let w = ws.map(|i| self.param(i));
                self.tape.quat_linear(x, w)?
            }
        };
        match lin.bias {
            Some(b) => {
                let b = self.param(b);
                self.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, n: Norm, x: Var) -> Result<Var> {
        let (g, b) = (self.param(n.gain), self.param(n.shift));
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Token + position + segment embeddings, before normalization. This is
    /// the sequence the adversarial perturbation is added to.
    pub fn embed(&mut self, token_ids: &[u32], segment_ids: &[u8]) -> Result<Var> {
        let cfg = &self.model.config;
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if n > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if segment_ids.len() != n {
            return Err(Error::dim("embed", &[n], &[segment_ids.len()]));
        }
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let segs: Vec<usize> = segment_ids.iter().map(|&s| s as usize).collect();
        if let Some(&bad) = segs.iter().find(|&&s| s > 1) {
            return Err(Error::Index {
                what: "segment id",
                index: bad,
                bound: 2,
            });
        }
        let idx = &self.model.index;
        let (token, token_up, position, segment) = (idx.token, idx.token_up, idx.position, idx.segment);

        let table = self.param(token);
        let mut tok = self.tape.gather_rows(table, &ids)?;
        if let Some(up) = token_up {
            tok = self.linear(up, tok)?;
        }
        let pos_table = self.param(position);
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.tape.gather_rows(pos_table, &positions)?;
        let seg_table = self.param(segment);
        let seg = self.tape.gather_rows(seg_table, &segs)?;
        let sum = self.tape.add(tok, pos)?;
        self.tape.add(sum, seg)
    }

    /// Runs the normalization and encoder stack over an embedding sum.
    /// `mask[t] == false` marks a padded key.
    pub fn encode_embedded(&mut self, emb: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.tape.shape(emb)[0];
        let mask_row = match mask {
            Some(m) if m.len() != n => return Err(Error::dim("attention mask", &[n], &[m.len()])),
            Some(m) => Some(
                self.tape
                    .constant(vec![n], m.iter().map(|&keep| if keep { 0.0 } else { MASK_OFFSET }).collect())?,
            ),
            None => None,
        };
        let emb_norm = self.model.index.emb_norm;
        let mut x = self.norm(emb_norm, emb)?;
        for l in 0..self.model.index.layers.len() {
            x = self.layer(l, x, mask_row)?;
        }
        Ok(x)
    }

    pub fn encoder(&mut self, token_ids: &[u32], segment_ids: &[u8], mask: Option<&[bool]>) -> Result<Var> {
        let emb = self.embed(token_ids, segment_ids)?;
        self.encode_embedded(emb, mask)
    }

    fn layer(&mut self, l: usize, x: Var, mask_row: Option<Var>) -> Result<Var> {
        let li = self.model.index.layers[l].clone();
        let heads = self.model.config.heads;
        let dh = self.model.config.head_dim();
        let q = self.linear(li.query, x)?;
        let k = self.linear(li.key, x)?;
        let v = self.linear(li.value, x)?;
        let scale = 1.0 / math_sqrt(dh as f64);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = self.tape.slice_cols(q, hd * dh, dh)?;
            let kh = self.tape.slice_cols(k, hd * dh, dh)?;
            let vh = self.tape.slice_cols(v, hd * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let raw = self.tape.matmul(qh, kt)?;
            let mut scores = self.tape.scale(raw, scale);
            if let Some(m) = mask_row {
                scores = self.tape.add_row(scores, m)?;
            }
            let probs = self.tape.softmax_rows(scores)?;
            if self.record_attention {
                self.attention.push(probs);
            }
            outs.push(self.tape.matmul(probs, vh)?);
        }
        let ctx = self.tape.concat_cols(&outs)?;
        let attn = self.linear(li.output, ctx)?;
        let res = self.tape.add(x, attn)?;
        let x = self.norm(li.attn_norm, res)?;

        let mut f = x;
        for &lin in &li.up {
            f = self.linear(lin, f)?;
        }
        f = self.tape.gelu(f);
        for &lin in &li.down {
            f = self.linear(lin, f)?;
        }
        let res = self.tape.add(x, f)?;
        self.norm(li.ffn_norm, res)
    }

    /// Decoder logits `|positions| × V` for the given hidden rows.
    pub fn mlm_logits(&mut self, hidden: Var, positions: &[usize]) -> Result<Var> {
        let rows = self.tape.gather_rows(hidden, positions)?;
        let mlm = self.model.index.mlm;
        self.linear(mlm, rows)
    }

    /// `σ(W2 · h_[CLS] + b)`, shape `[1]`.
    pub fn nsp_probability(&mut self, hidden: Var) -> Result<Var> {
        let cls = self.tape.gather_rows(hidden, &[0])?;
        let nsp = self.model.index.nsp;
        let logit = self.linear(nsp, cls)?;
        Ok(self.tape.sigmoid(logit))
    }

    /// Per-head probabilities `1 × h` of one source's classifier net.
    pub fn head_probabilities(&mut self, hidden: Var, source: usize) -> Result<Var> {
        let lin = *self.model.index.classifiers.get(source).ok_or(Error::Index {
            what: "source",
            index: source,
            bound: self.model.index.classifiers.len(),
        })?;
        let cls = self.tape.gather_rows(hidden, &[0])?;
        let logits = self.linear(lin, cls)?;
        Ok(self.tape.sigmoid(logits))
    }

    fn pooled(&mut self, hidden: Var, source: usize) -> Result<Var> {
        let probs = self.head_probabilities(hidden, source)?;
        let kind = match self.model.config.pooling {
            Pooling::Min => Reduce::Min,
            Pooling::Max => Reduce::Max,
            Pooling::Mean => Reduce::Mean,
        };
        self.tape.reduce_cols(probs, kind)
    }

    /// Pooled probability for `source`, shape `[1]`. A source the model was
    /// not built with gets the average of every source net's pooled score.
    pub fn classify(&mut self, hidden: Var, source: &str) -> Result<Var> {
        if let Some(s) = self.model.config.source_index(source) {
            return self.pooled(hidden, s);
        }
        let all = (0..self.model.index.classifiers.len())
            .map(|s| self.pooled(hidden, s))
            .collect::<Result<Vec<_>>>()?;
        let stacked = self.tape.concat_rows(&all)?;
        Ok(self.tape.mean(stacked))
    }

    pub fn classify_example(&mut self, ex: &FinetuneExample) -> Result<Var> {
        let segs = vec![0u8; ex.token_ids.len()];
        let h = self.encoder(&ex.token_ids, &segs, None)?;
        self.classify(h, &ex.source)
    }
}

fn math_sqrt(x: f64) -> f64 {
    crate::math::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, SEP};

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            embed_dim: 8,
            hidden: 16,
            attn_dim: 8,
            inter_dim: 8,
            layers,
            heads: 2,
            ffn_dim: 64,
            max_len: 12,
            ..ModelConfig::reference()
        }
    }

    #[test]
    fn rejects_bad_head_count() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::reference()
        };
        match Model::build(cfg, 0) {
            Err(Error::Config(m)) => assert!(m.starts_with("heads")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::build(tiny(1), 7).unwrap();
        let b = Model::build(tiny(1), 7).unwrap();
        let c = Model::build(tiny(1), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn initial_values() {
        let m = Model::build(tiny(1), 1).unwrap();
        for (name, t) in m.named_params() {
            let d = t.data();
            if name.ends_with(".gain") {
                assert!(d.iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") || name.ends_with(".shift") {
                assert!(d.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let tok = m.param("embeddings.token").unwrap().data();
        let var = tok.iter().map(|v| v * v).sum::<f64>() / tok.len() as f64;
        assert!((libm::sqrt(var) - INIT_STD).abs() < 0.004);
    }

    #[test]
    fn zero_layer_stack_is_normalized_embedding() {
        let m = Model::build(tiny(0), 3).unwrap();
        let ids = [CLS, 9, 10, SEP];
        let segs = [0, 0, 0, 0];
        let out = m.encode(&ids, &segs, None).unwrap();
        let tok = m.param("embeddings.token").unwrap();
        let up = ["r", "i", "j", "k"]
            .map(|c| m.param(&format!("embeddings.token_up.weight.{c}")).unwrap().clone());
        let w = crate::quaternion::QuaternionMatrix { components: up };
        let pos = m.param("embeddings.position").unwrap();
        let seg = m.param("embeddings.segment").unwrap();
        for (t, row) in out.data().chunks(16).enumerate() {
            let lifted = crate::quaternion::quaternion_linear(tok.row(ids[t] as usize), &w).unwrap();
            let sum: Vec<f64> = (0..16).map(|j| lifted[j] + pos.row(t)[j] + seg.row(0)[j]).collect();
            let mean = sum.iter().sum::<f64>() / 16.0;
            let var = sum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            for j in 0..16 {
                let expect = (sum[j] - mean) / libm::sqrt(var + LAYER_NORM_EPS);
                assert!((row[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_errors() {
        let m = Model::build(tiny(1), 3).unwrap();
        assert!(matches!(
            m.encode(&[CLS, 40], &[0, 0], None),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            m.encode(&[5; 13], &[0; 13], None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn every_factorization_keeps_shape() {
        for bits in 0..16u8 {
            let cfg = tiny(1).with_factorizations(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0);
            let m = Model::build(cfg.clone(), 2).unwrap();
            let out = m.encode(&[CLS, 7, 8, 9, SEP], &[0; 5], None).unwrap();
            assert_eq!(out.shape(), &[5, 16]);
            assert_eq!(m.num_params() as u64, count_params(&cfg, CountMode::Exact));
        }
    }

    #[test]
    fn masked_keys_get_no_weight_and_pads_do_not_leak() {
        let m = Model::build(tiny(2), 5).unwrap();
        let mask = [true, true, true, true, false, false];
        let a = [CLS, 11, 12, SEP, 20, 21];
        let b = [CLS, 11, 12, SEP, 33, 6];
        let segs = [0; 6];
        let mut s = m.session(false);
        s.record_attention(true);
        let ha = s.encoder(&a, &segs, Some(&mask)).unwrap();
        for &w in s.attention_weights() {
            for row in s.tape.data(w).chunks(6) {
                assert!(row[4] + row[5] < 1e-6);
            }
        }
        let ha = s.tape.data(ha)[..4 * 16].to_vec();
        let hb = m.encode(&b, &segs, Some(&mask)).unwrap();
        for (x, y) in ha.iter().zip(&hb.data()[..4 * 16]) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn head_behaviour() {
        let mut m = Model::build(tiny(1), 4).unwrap();
        let ex = FinetuneExample {
            token_ids: vec![CLS, 9, SEP],
            source: "news".into(),
            label: 1,
        };
        // zero NSP weights give exactly one half
        m.param_mut("nsp.weight").unwrap().data_mut().fill(0.0);
        let mut s = m.session(false);
        let h = s.encoder(&ex.token_ids, &[0; 3], None).unwrap();
        let p = s.nsp_probability(h).unwrap();
        assert_eq!(s.tape.data(p), &[0.5]);
        let logits = s.mlm_logits(h, &[1, 2]).unwrap();
        assert_eq!(s.tape.shape(logits), &[2, 40]);
        assert!(matches!(s.mlm_logits(h, &[3]), Err(Error::Index { .. })));

        // unseen source averages the pooled scores
        let news = s.classify(h, "news").unwrap();
        let fin = s.classify(h, "finance").unwrap();
        let other = s.classify(h, "sports").unwrap();
        let expect = (s.tape.data(news)[0] + s.tape.data(fin)[0]) / 2.0;
        assert!((s.tape.data(other)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn pooling_definitions() {
        let p = [0.2, 0.8];
        assert_eq!(Pooling::Min.apply(&p), 0.2);
        assert_eq!(Pooling::Max.apply(&p), 0.8);
        assert_eq!(Pooling::Mean.apply(&p), 0.5);
        assert_eq!(Pooling::Min.apply(&[0.3]), 0.3);
    }
}
