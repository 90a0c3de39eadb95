//! Pretraining, fine-tuning and adversarial fine-tuning with a learnable
//! per-dimension noise magnitude.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataprep::{FinetuneExample, PretrainExample};
use crate::model::{Model, Session};
use crate::rng::{self, derive_seed};
use crate::tensor::{Adam, AdamConfig, Tensor, Var};
use crate::{math, Error, Result};

pub const PRETRAIN_LR: f64 = 5e-5;
pub const FINETUNE_LR: f64 = 2e-5;

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L1")]
    pub l1: Option<f64>,
    #[serde(rename = "L2")]
    pub l2: Option<f64>,
    #[serde(rename = "L_hs")]
    pub l_hs: Option<f64>,
    #[serde(rename = "L_robust")]
    pub l_robust: Option<f64>,
    pub eps_min: Option<f64>,
    pub eps_max: Option<f64>,
    pub eps_mean: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLosses {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub l_hs: f64,
    pub l_robust: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub a: f64,
    pub b: f64,
    pub lambda_adv: f64,
    pub lambda_eps: f64,
    /// Step size of the optimizer on the noise magnitude.
    pub eps_lr: f64,
    /// Train the model toward the target (flipped) labels under noise,
    /// reading the combined objective literally.
    #[serde(default)]
    pub literal: bool,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            a: 1.0,
            b: 2.0,
            lambda_adv: 1.0,
            lambda_eps: 1.0,
            eps_lr: 1e-2,
            literal: false,
        }
    }
}

/// Learnable noise magnitude, one scale per hidden dimension, kept inside
/// the box `[a, b]`.
#[derive(Clone, Debug)]
pub struct NoiseMagnitude {
    epsilon: Vec<f64>,
    a: f64,
    b: f64,
    optimizer: Adam,
}

impl NoiseMagnitude {
    /// Starts every component at the box midpoint.
    pub fn new(dim: usize, a: f64, b: f64, lr: f64) -> Result<Self> {
        Self::filled(dim, (a + b) / 2.0, a, b, lr)
    }

    pub fn filled(dim: usize, value: f64, a: f64, b: f64, lr: f64) -> Result<Self> {
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::Config(format!(
                "noise bounds need 0 < a <= b, got a = {a}, b = {b}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("noise dimension must be positive".into()));
        }
        Ok(NoiseMagnitude {
            epsilon: vec![value.clamp(a, b); dim],
            a,
            b,
            optimizer: Adam::new(AdamConfig::with_lr(lr)),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn min(&self) -> f64 {
        self.epsilon.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.epsilon.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.epsilon.iter().sum::<f64>() / self.epsilon.len() as f64
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.epsilon.iter().map(|e| e * e).sum())
    }

    /// Counts over `bins` equal-width bins spanning `[a, b]`.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let bins = bins.max(1);
        let mut out = vec![0; bins];
        let width = self.b - self.a;
        for &e in &self.epsilon {
            let k = if width > 0.0 {
                (((e - self.a) / width) * bins as f64) as usize
            } else {
                0
            };
            out[k.min(bins - 1)] += 1;
        }
        out
    }

    fn project(&mut self) {
        for e in &mut self.epsilon {
            *e = e.clamp(self.a, self.b);
        }
    }
}

/// Normalized adversarial direction for one example, with the clean
/// embedding sum it was computed at.
#[derive(Clone, Debug)]
pub struct Direction {
    pub rows: usize,
    pub embedding: Vec<f64>,
    /// `g / ‖g‖` where `g = ∇ −log P(ỹ | s)` over the whole sequence.
    pub unit: Vec<f64>,
    /// The gradient vanished; the perturbation is zero.
    pub degenerate: bool,
}

impl Direction {
    /// `δ = −ε ⊙ g/‖g‖`, with `ε` broadcast over positions.
    pub fn delta(&self, eps: &[f64]) -> Vec<f64> {
        let h = eps.len();
        self.unit
            .iter()
            .enumerate()
            .map(|(k, &u)| -eps[k % h] * u)
            .collect()
    }
}

fn target_label(y: u8) -> f64 {
    if y == 1 {
        0.0
    } else {
        1.0
    }
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Contract(format!("{what} became non-finite")))
    }
}

fn check_sources(model: &Model, batch: &[FinetuneExample]) -> Result<()> {
    for (i, ex) in batch.iter().enumerate() {
        if model.config().source_index(&ex.source).is_none() {
            return Err(Error::Validation(format!(
                "example {i} has source {:?}, unknown to the model",
                ex.source
            )));
        }
        if ex.label > 1 {
            return Err(Error::Validation(format!("example {i} has label {}", ex.label)));
        }
    }
    if batch.is_empty() {
        return Err(Error::Input("empty fine-tuning batch".into()));
    }
    Ok(())
}

/// Records `(L1, L2)` for a batch: mean cross-entropy over every masked
/// slot in the batch and mean next-sentence binary cross-entropy.
pub fn pretrain_loss(s: &mut Session<'_>, batch: &[PretrainExample]) -> Result<(Var, Var)> {
    if batch.is_empty() {
        return Err(Error::Input("empty pretraining batch".into()));
    }
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut nsp = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let h = s.encoder(&ex.token_ids, &ex.segment_ids, None)?;
        if !ex.masked_positions.is_empty() {
            logits.push(s.mlm_logits(h, &ex.masked_positions)?);
            targets.extend(ex.masked_labels.iter().map(|&t| t as usize));
        }
        nsp.push(s.nsp_probability(h)?);
        labels.push(f64::from(ex.is_next));
    }
    if logits.is_empty() {
        return Err(Error::Input("batch has no masked positions".into()));
    }
    let all = s.tape.concat_rows(&logits)?;
    let l1 = s.tape.softmax_cross_entropy(all, &targets)?;
    let probs = s.tape.concat_rows(&nsp)?;
    let l2 = s.tape.binary_cross_entropy(probs, &labels)?;
    Ok((l1, l2))
}

/// Mean binary cross-entropy of the classifier against `labels`, with an
/// optional perturbation added to each example's embedding sum.
pub fn finetune_loss(
    s: &mut Session<'_>,
    batch: &[FinetuneExample],
    deltas: Option<&[Vec<f64>]>,
    labels: &[f64],
) -> Result<Var> {
    let mut probs = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let segs = vec![0u8; ex.token_ids.len()];
        let mut emb = s.embed(&ex.token_ids, &segs)?;
        if let Some(d) = deltas {
            let shape = s.tape.shape(emb).to_vec();
            let dv = s.tape.constant(shape, d[i].clone())?;
            emb = s.tape.add(emb, dv)?;
        }
        let h = s.encode_embedded(emb, None)?;
        probs.push(s.classify(h, &ex.source)?);
    }
    let p = s.tape.concat_rows(&probs)?;
    s.tape.binary_cross_entropy(p, labels)
}

fn labels_of(batch: &[FinetuneExample]) -> Vec<f64> {
    batch.iter().map(|e| f64::from(e.label)).collect()
}

/// Per-example normalized gradients of the target-class loss with respect
/// to the embedding sums, with every model parameter held fixed.
pub fn adversarial_directions(model: &Model, batch: &[FinetuneExample]) -> Result<Vec<Direction>> {
    let mut s = model.session(false);
    let mut leaves = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let segs = vec![0u8; ex.token_ids.len()];
        let emb = s.embed(&ex.token_ids, &segs)?;
        let value = s.tape.value(emb).clone().trainable();
        let leaf = s.tape.leaf(value);
        let h = s.encode_embedded(leaf, None)?;
        let p = s.classify(h, &ex.source)?;
        losses.push(s.tape.binary_cross_entropy(p, &[target_label(ex.label)])?);
        leaves.push(leaf);
    }
    // examples are independent, so the gradient of the sum splits per leaf
    let stacked = s.tape.concat_rows(&losses)?;
    let total = s.tape.sum(stacked);
    s.tape.backward(total)?;
    leaves
        .into_iter()
        .map(|leaf| {
            let embedding = s.tape.data(leaf).to_vec();
            let rows = s.tape.shape(leaf)[0];
            let g = s.tape.take_grad(leaf).unwrap_or_else(|| vec![0.0; embedding.len()]);
            let norm = math::sqrt(g.iter().map(|v| v * v).sum());
            let degenerate = !(norm > 0.0 && norm.is_finite());
            let unit = if degenerate {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|v| v / norm).collect()
            };
            Ok(Direction {
                rows,
                embedding,
                unit,
                degenerate,
            })
        })
        .collect()
}

/// `δ_i = −ε ⊙ ∇/‖∇‖` for every example of the batch.
pub fn adversarial_delta(
    model: &Model,
    batch: &[FinetuneExample],
    eps: &NoiseMagnitude,
) -> Result<Vec<(Vec<f64>, bool)>> {
    if eps.values().len() != model.config().hidden {
        return Err(Error::dim("adversarial_delta", &[model.config().hidden], &[eps.values().len()]));
    }
    Ok(adversarial_directions(model, batch)?
        .into_iter()
        .map(|d| (d.delta(eps.values()), d.degenerate))
        .collect())
}

/// Target-label loss under the perturbation implied by `eps`, minus
/// `λ_ε ‖ε‖₂`, recorded on `s` with `eps_var` as the only trainable leaf.
fn epsilon_objective(
    s: &mut Session<'_>,
    batch: &[FinetuneExample],
    dirs: &[Direction],
    eps_var: Var,
    lambda_eps: f64,
) -> Result<Var> {
    let neg_eps = s.tape.scale(eps_var, -1.0);
    let mut probs = Vec::with_capacity(batch.len());
    for (ex, d) in batch.iter().zip(dirs) {
        let h = s.model().config().hidden;
        let emb = s.tape.constant(vec![d.rows, h], d.embedding.clone())?;
        let unit = s.tape.constant(vec![d.rows, h], d.unit.clone())?;
        let delta = s.tape.mul_row(unit, neg_eps)?;
        let x = s.tape.add(emb, delta)?;
        let hid = s.encode_embedded(x, None)?;
        probs.push(s.classify(hid, &ex.source)?);
    }
    let p = s.tape.concat_rows(&probs)?;
    let targets: Vec<f64> = batch.iter().map(|e| target_label(e.label)).collect();
    let l_adv = s.tape.binary_cross_entropy(p, &targets)?;
    let sq = s.tape.mul(eps_var, eps_var)?;
    let sum = s.tape.sum(sq);
    let norm = s.tape.sqrt(sum);
    let reg = s.tape.scale(norm, lambda_eps);
    s.tape.sub(l_adv, reg)
}

/// One projected optimizer step on `ε` against the frozen model. Returns
/// the objective value before the step.
pub fn update_epsilon(
    model: &Model,
    batch: &[FinetuneExample],
    eps: &mut NoiseMagnitude,
    lambda_eps: f64,
) -> Result<f64> {
    let dirs = adversarial_directions(model, batch)?;
    update_epsilon_with(model, batch, &dirs, eps, lambda_eps)
}

fn update_epsilon_with(
    model: &Model,
    batch: &[FinetuneExample],
    dirs: &[Direction],
    eps: &mut NoiseMagnitude,
    lambda_eps: f64,
) -> Result<f64> {
    let mut s = model.session(false);
    let h = eps.epsilon.len();
    let eps_var = s.tape.leaf(Tensor::new(vec![h], eps.epsilon.clone())?.trainable());
    let j = epsilon_objective(&mut s, batch, dirs, eps_var, lambda_eps)?;
    let value = check_finite("noise objective", s.tape.data(j)[0])?;
    s.tape.backward(j)?;
    let g = s.tape.take_grad(eps_var).unwrap_or_else(|| vec![0.0; h]);
    let mut t = Tensor::new(vec![h], eps.epsilon.clone())?.trainable();
    t.set_grad(Some(g))?;
    eps.optimizer.step(core::slice::from_mut(&mut t))?;
    eps.epsilon = t.into_data();
    eps.project();
    Ok(value)
}

/// Model, optimizer and bookkeeping for one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    optimizer: Adam,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(model: Model, optimizer: AdamConfig, seed: u64) -> Self {
        TrainState {
            model,
            optimizer: Adam::new(optimizer),
            step: 0,
            seed,
            history: Vec::new(),
        }
    }

    pub fn optimizer_config(&self) -> AdamConfig {
        self.optimizer.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.config.lr = lr;
    }

    /// Hands the parameter gradients of a finished backward pass to Adam.
    /// Parameters the loss never reached get zero gradients.
    fn apply(&mut self, grads: Vec<Option<Vec<f64>>>) -> Result<()> {
        for (p, g) in self.model.params_mut().iter_mut().zip(grads) {
            let n = p.numel();
            p.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])))?;
        }
        self.optimizer.step(self.model.params_mut())?;
        for p in self.model.params_mut() {
            p.take_grad();
        }
        Ok(())
    }

    fn record(&mut self, rec: StepRecord) {
        self.step += 1;
        self.history.push(StepRecord {
            step: self.step,
            ..rec
        });
    }

    pub fn pretrain_step(&mut self, batch: &[PretrainExample]) -> Result<PretrainLosses> {
        let mut s = self.model.session(true);
        let (l1, l2) = pretrain_loss(&mut s, batch)?;
        let total = s.tape.add(l1, l2)?;
        let losses = PretrainLosses {
            l1: check_finite("L1", s.tape.data(l1)[0])?,
            l2: check_finite("L2", s.tape.data(l2)[0])?,
            total: s.tape.data(total)[0],
        };
        s.tape.backward(total)?;
        let grads = s.take_param_grads();
        drop(s);
        self.apply(grads)?;
        self.record(StepRecord {
            l1: Some(losses.l1),
            l2: Some(losses.l2),
            ..Default::default()
        });
        Ok(losses)
    }

    fn finetune_update(&mut self, batch: &[FinetuneExample], deltas: Option<&[Vec<f64>]>, labels: &[f64], weight: f64) -> Result<f64> {
        let mut s = self.model.session(true);
        let loss = finetune_loss(&mut s, batch, deltas, labels)?;
        let value = check_finite("fine-tuning loss", s.tape.data(loss)[0])?;
        let scaled = s.tape.scale(loss, weight);
        s.tape.backward(scaled)?;
        let grads = s.take_param_grads();
        drop(s);
        self.apply(grads)?;
        Ok(value)
    }

    pub fn finetune_step(&mut self, batch: &[FinetuneExample]) -> Result<f64> {
        check_sources(&self.model, batch)?;
        let l_hs = self.finetune_update(batch, None, &labels_of(batch), 1.0)?;
        self.record(StepRecord {
            l_hs: Some(l_hs),
            ..Default::default()
        });
        Ok(l_hs)
    }

    /// Clean step, adversarial perturbation against the updated model, a
    /// robustness step on the perturbed inputs, then a noise-magnitude
    /// update. With `λ_adv = 0` the model follows exactly the plain
    /// fine-tuning trajectory.
    pub fn adversarial_finetune_step(
        &mut self,
        batch: &[FinetuneExample],
        eps: &mut NoiseMagnitude,
        cfg: &AdversarialConfig,
    ) -> Result<AdversarialLosses> {
        check_sources(&self.model, batch)?;
        if eps.values().len() != self.model.config().hidden {
            return Err(Error::dim(
                "adversarial_finetune_step",
                &[self.model.config().hidden],
                &[eps.values().len()],
            ));
        }
        let labels = labels_of(batch);
        let l_hs = self.finetune_update(batch, None, &labels, 1.0)?;

        let dirs = adversarial_directions(&self.model, batch)?;
        let deltas: Vec<Vec<f64>> = dirs.iter().map(|d| d.delta(eps.values())).collect();
        let eps_norm = eps.norm();
        let l_robust = if cfg.lambda_adv != 0.0 {
            let robust_labels: Vec<f64> = if cfg.literal {
                batch.iter().map(|e| target_label(e.label)).collect()
            } else {
                labels.clone()
            };
            let v = self.finetune_update(batch, Some(&deltas), &robust_labels, cfg.lambda_adv)?;
            if cfg.literal {
                // report against the true labels regardless of the training target
                self.perturbed_loss(batch, &deltas, &labels)?
            } else {
                v
            }
        } else {
            self.perturbed_loss(batch, &deltas, &labels)?
        };
        update_epsilon_with(&self.model, batch, &dirs, eps, cfg.lambda_eps)?;

        let total = l_hs + cfg.lambda_adv * l_robust - cfg.lambda_eps * eps_norm;
        self.record(StepRecord {
            l_hs: Some(l_hs),
            l_robust: Some(l_robust),
            eps_min: Some(eps.min()),
            eps_max: Some(eps.max()),
            eps_mean: Some(eps.mean()),
            ..Default::default()
        });
        Ok(AdversarialLosses {
            l_hs,
            l_robust,
            total,
        })
    }

    fn perturbed_loss(&self, batch: &[FinetuneExample], deltas: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
        let mut s = self.model.session(false);
        let l = finetune_loss(&mut s, batch, Some(deltas), labels)?;
        Ok(s.tape.data(l)[0])
    }
}

/// Endless shuffled mini-batches: each epoch is a fresh permutation.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::Input("batch sampler needs data and a positive batch size".into()));
        }
        let mut s = BatchSampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut r = rng::seeded(derive_seed(self.seed, self.epoch));
        self.order.shuffle(&mut r);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch.min(self.n) {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Fraction of masked slots whose arg-max prediction is the original id.
pub fn mlm_accuracy(model: &Model, examples: &[PretrainExample]) -> Result<f64> {
    let v = model.config().vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        if ex.masked_positions.is_empty() {
            continue;
        }
        let mut s = model.session(false);
        let h = s.encoder(&ex.token_ids, &ex.segment_ids, None)?;
        let logits = s.mlm_logits(h, &ex.masked_positions)?;
        for (row, &label) in s.tape.data(logits).chunks(v).zip(&ex.masked_labels) {
            let best = argmax(row);
            hit += usize::from(best == label as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no masked positions to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Classifier probability with `noise` (`n × H`, row-major) added to the
/// embedding sum.
pub fn predict_perturbed(model: &Model, ex: &FinetuneExample, noise: &[f64]) -> Result<f64> {
    let mut s = model.session(false);
    let segs = vec![0u8; ex.token_ids.len()];
    let emb = s.embed(&ex.token_ids, &segs)?;
    let shape = s.tape.shape(emb).to_vec();
    let nv = s.tape.constant(shape, noise.to_vec())?;
    let x = s.tape.add(emb, nv)?;
    let h = s.encode_embedded(x, None)?;
    let p = s.classify(h, &ex.source)?;
    Ok(s.tape.data(p)[0])
}
