//! Pretraining and fine-tuning example construction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, derive_seed};
use crate::tokenizer::{SubwordTokenizer, CLS, MASK, NUM_SPECIAL, PAD, SEP};
use crate::{Error, Result};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_TAU: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// `[CLS] A [SEP] B [SEP]`, masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub is_next: u8,
    pub masked_positions: Vec<usize>,
    pub masked_labels: Vec<u32>,
}

impl PretrainExample {
    /// Checks the structural invariants: layout, segment ids and that masks
    /// never cover `[CLS]`/`[SEP]` slots.
    pub fn validate(&self, max_len: usize, vocab_size: usize) -> Result<()> {
        let n = self.token_ids.len();
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if n > max_len || n < 5 {
            return bad("sequence length out of range");
        }
        if self.segment_ids.len() != n {
            return bad("segment_ids length differs from token_ids");
        }
        if self.is_next > 1 {
            return bad("is_next must be 0 or 1");
        }
        if self.token_ids.iter().any(|&t| t as usize >= vocab_size) {
            return bad("token id outside the vocabulary");
        }
        if self.masked_positions.is_empty() || self.masked_positions.len() != self.masked_labels.len() {
            return bad("masked_positions and masked_labels must be non-empty and equal length");
        }
        let seps = self.sep_positions();
        if self.token_ids[0] != CLS || seps.len() != 2 || seps[1] != n - 1 {
            return bad("layout is not [CLS] A [SEP] B [SEP]");
        }
        for (i, &s) in self.segment_ids.iter().enumerate() {
            if s != u8::from(i > seps[0]) {
                return bad("segment ids must be 0 through the first [SEP] and 1 afterwards");
            }
        }
        for &p in &self.masked_positions {
            if p >= n || p == 0 || seps.contains(&p) {
                return bad("masked position covers a special slot");
            }
        }
        Ok(())
    }

    /// Positions of `[SEP]`. Masking never writes a special id, so these
    /// are exactly the separator slots.
    fn sep_positions(&self) -> Vec<usize> {
        self.token_ids
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == SEP)
            .map(|(i, _)| i)
            .collect()
    }

    /// The sequence with every masked position restored to its label.
    pub fn restored(&self) -> Vec<u32> {
        let mut ids = self.token_ids.clone();
        for (&p, &l) in self.masked_positions.iter().zip(&self.masked_labels) {
            ids[p] = l;
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub token_ids: Vec<u32>,
    pub source: String,
    pub label: u8,
}

// ---- sentences -------------------------------------------------------

const ABBREVIATIONS: [&str; 7] = ["mr.", "mrs.", "dr.", "vs.", "e.g.", "i.e.", "etc."];

/// Rule-based sentence splitter: a run of `.`, `!` or `?` ends a sentence
/// when followed by whitespace and an uppercase letter, or by the end of the
/// text. A `.` closing a guarded abbreviation never ends a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (_, ch) = chars[i];
        if !matches!(ch, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut end = i;
        while end + 1 < chars.len() && matches!(chars[end + 1].1, '.' | '!' | '?') {
            end += 1;
        }
        let mut next = end + 1;
        let saw_space = next < chars.len() && chars[next].1.is_whitespace();
        while next < chars.len() && chars[next].1.is_whitespace() {
            next += 1;
        }
        let boundary = if next >= chars.len() {
            true
        } else {
            saw_space && chars[next].1.is_uppercase()
        };
        let byte_end = chars[end].0 + chars[end].1.len_utf8();
        if boundary && !ends_with_abbreviation(&text[start..byte_end]) {
            push_trimmed(&mut out, &text[start..byte_end]);
            start = byte_end;
        }
        i = end + 1;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn ends_with_abbreviation(fragment: &str) -> bool {
    let last = fragment.split_whitespace().last().unwrap_or("");
    let lower = last.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

// ---- next-sentence pairing ------------------------------------------

/// Probability of pairing a sentence with its true successor so that the
/// expected next count `M·p1` equals the expected not-next count
/// `(M + N)(1 - p1)`, where `M` documents have several sentences and `N`
/// have one.
pub fn compute_next_probability(multi: usize, single: usize) -> Result<f64> {
    if multi + single == 0 {
        return Err(Error::Input("no documents to pair".into()));
    }
    Ok((multi + single) as f64 / (2 * multi + single) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub first: String,
    pub second: String,
    pub is_next: bool,
}

/// Documents split into sentences, with the multi/single counts.
#[derive(Clone, Debug)]
pub struct SentenceCorpus {
    pub docs: Vec<Vec<String>>,
    pub multi: usize,
    pub single: usize,
}

impl SentenceCorpus {
    pub fn new(docs: &[Document]) -> Self {
        Self::from_sentences(docs.iter().map(|d| split_sentences(&d.text)).collect())
    }

    pub fn from_sentences(docs: Vec<Vec<String>>) -> Self {
        let multi = docs.iter().filter(|d| d.len() >= 2).count();
        let single = docs.iter().filter(|d| d.len() == 1).count();
        SentenceCorpus {
            docs,
            multi,
            single,
        }
    }

    pub fn next_probability(&self) -> Result<f64> {
        compute_next_probability(self.multi, self.single)
    }
}

pub fn pair_sentences(docs: &[Document], p1: f64, seed: u64) -> Result<Vec<SentencePair>> {
    pair_corpus(&SentenceCorpus::new(docs), p1, seed)
}

/// One sampling unit per document. A multi-sentence document picks a random
/// consecutive pair and keeps it as `next` with probability `p1`, otherwise
/// pairs its first sentence with a random sentence of another document. A
/// single-sentence document emits a `not next` pair with probability
/// `1 - p1`; with no multi-sentence documents at all every single-sentence
/// document emits one.
pub fn pair_corpus(corpus: &SentenceCorpus, p1: f64, seed: u64) -> Result<Vec<SentencePair>> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::Input(format!("p1 = {p1} is not a probability")));
    }
    let mut offsets = Vec::with_capacity(corpus.docs.len());
    let mut total = 0usize;
    for d in &corpus.docs {
        offsets.push(total);
        total += d.len();
    }
    let flat: Vec<&String> = corpus.docs.iter().flatten().collect();
    let non_empty = corpus.docs.iter().filter(|d| !d.is_empty()).count();
    if non_empty < 2 {
        return Err(Error::Input(
            "need at least two non-empty documents to draw not-next partners".into(),
        ));
    }
    let all_single = corpus.multi == 0;
    let mut pairs = Vec::new();
    for (i, sents) in corpus.docs.iter().enumerate() {
        if sents.is_empty() {
            continue;
        }
        let mut rng = rng::seeded(derive_seed(seed, i as u64));
        let random_other = |rng: &mut rng::Rng| -> String {
            let own = sents.len();
            let r = rng.random_range(0..total - own);
            let idx = if r < offsets[i] { r } else { r + own };
            flat[idx].clone()
        };
        if sents.len() >= 2 {
            let k = rng.random_range(0..sents.len() - 1);
            if rng.random::<f64>() < p1 {
                pairs.push(SentencePair {
                    first: sents[k].clone(),
                    second: sents[k + 1].clone(),
                    is_next: true,
                });
            } else {
                let second = random_other(&mut rng);
                pairs.push(SentencePair {
                    first: sents[k].clone(),
                    second,
                    is_next: false,
                });
            }
        } else if all_single || rng.random::<f64>() >= p1 {
            let second = random_other(&mut rng);
            pairs.push(SentencePair {
                first: sents[0].clone(),
                second,
                is_next: false,
            });
        }
    }
    Ok(pairs)
}

// ---- token layout and masking ---------------------------------------

/// Unmasked `[CLS] A [SEP] B [SEP]` sequence. The longer side is trimmed
/// from its end until the whole sequence fits in `max_len`.
pub fn pair_tokens(
    tokenizer: &SubwordTokenizer,
    pair: &SentencePair,
    max_len: usize,
) -> Result<PretrainExample> {
    if max_len < 5 {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold a sentence pair"
        )));
    }
    let mut a = tokenizer.encode(&pair.first);
    let mut b = tokenizer.encode(&pair.second);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("sentence encodes to no tokens".into()));
    }
    while a.len() + b.len() + 3 > max_len {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let mut token_ids = Vec::with_capacity(a.len() + b.len() + 3);
    token_ids.push(CLS);
    token_ids.extend(&a);
    token_ids.push(SEP);
    let boundary = token_ids.len();
    token_ids.extend(&b);
    token_ids.push(SEP);
    let segment_ids = (0..token_ids.len()).map(|i| u8::from(i >= boundary)).collect();
    Ok(PretrainExample {
        token_ids,
        segment_ids,
        is_next: u8::from(pair.is_next),
        masked_positions: Vec::new(),
        masked_labels: Vec::new(),
    })
}

/// `tau` independent maskings of one sequence. Each picks
/// `ceil(mask_rate · maskable)` distinct non-special positions; a picked
/// position becomes `[MASK]` 80% of the time, a random non-special id 10%,
/// and stays unchanged 10%.
pub fn make_masked_instances(
    base: &PretrainExample,
    tau: usize,
    mask_rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<PretrainExample>> {
    if tau == 0 {
        return Err(Error::Input("masking factor must be at least 1".into()));
    }
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Input(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::Config("vocabulary has no non-special tokens".into()));
    }
    let maskable: Vec<usize> = base
        .token_ids
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t != CLS && t != SEP && t != PAD)
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::Input("sequence has no maskable positions".into()));
    }
    let count = libm::ceil(mask_rate * maskable.len() as f64) as usize;
    let count = count.clamp(1, maskable.len());
    let mut out = Vec::with_capacity(tau);
    for t in 0..tau {
        let mut rng = rng::seeded(derive_seed(seed, t as u64));
        let mut picks: Vec<usize> = index::sample(&mut rng, maskable.len(), count)
            .into_iter()
            .map(|k| maskable[k])
            .collect();
        picks.sort_unstable();
        let mut inst = base.clone();
        inst.masked_labels = picks.iter().map(|&p| base.token_ids[p]).collect();
        for &p in &picks {
            let roll: f64 = rng.random();
            if roll < 0.8 {
                inst.token_ids[p] = MASK;
            } else if roll < 0.9 {
                inst.token_ids[p] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
            }
        }
        inst.masked_positions = picks;
        out.push(inst);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub max_len: usize,
    pub tau: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            max_len: DEFAULT_MAX_LEN,
            tau: DEFAULT_TAU,
            mask_rate: DEFAULT_MASK_RATE,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrepareStats {
    pub multi: usize,
    pub single: usize,
    pub p1: f64,
    pub pairs: usize,
    pub next: usize,
    pub not_next: usize,
}

/// Splits, pairs, tokenizes and masks a raw corpus. Instances are ordered by
/// pair, `tau` consecutive instances per pair.
pub fn prepare_pretraining(
    docs: &[Document],
    tokenizer: &SubwordTokenizer,
    cfg: &PrepareConfig,
) -> Result<(Vec<PretrainExample>, PrepareStats)> {
    let corpus = SentenceCorpus::new(docs);
    let p1 = corpus.next_probability()?;
    let pairs = pair_corpus(&corpus, p1, cfg.seed)?;
    let mask_seed = derive_seed(cfg.seed, u64::MAX);
    let mut out = Vec::with_capacity(pairs.len() * cfg.tau);
    for (i, pair) in pairs.iter().enumerate() {
        let base = pair_tokens(tokenizer, pair, cfg.max_len)?;
        out.extend(make_masked_instances(
            &base,
            cfg.tau,
            cfg.mask_rate,
            tokenizer.vocab_size(),
            derive_seed(mask_seed, i as u64),
        )?);
    }
    let next = pairs.iter().filter(|p| p.is_next).count();
    let stats = PrepareStats {
        multi: corpus.multi,
        single: corpus.single,
        p1,
        pairs: pairs.len(),
        next,
        not_next: pairs.len() - next,
    };
    Ok((out, stats))
}

/// `[CLS] text [SEP]`, with the text truncated to `max_len - 2` ids.
pub fn finetune_example(
    tokenizer: &SubwordTokenizer,
    text: &str,
    source: &str,
    label: u8,
    max_len: usize,
) -> Result<FinetuneExample> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} is too small")));
    }
    if label > 1 {
        return Err(Error::Validation(format!("label {label} is not 0 or 1")));
    }
    let mut ids = tokenizer.encode(text);
    ids.truncate(max_len - 2);
    let mut token_ids = vec![CLS];
    token_ids.extend(ids);
    token_ids.push(SEP);
    Ok(FinetuneExample {
        token_ids,
        source: source.into(),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document {
            text: text.into(),
            source: "news".into(),
            label: None,
        }
    }

    #[test]
    fn splitting_rules() {
        assert_eq!(split_sentences("I won. You lost."), ["I won.", "You lost."]);
        assert_eq!(split_sentences("no punctuation here"), ["no punctuation here"]);
        assert_eq!(
            split_sentences("Dr. Smith left. He ran."),
            ["Dr. Smith left.", "He ran."]
        );
        assert_eq!(split_sentences("Wait?! Yes."), ["Wait?!", "Yes."]);
        assert_eq!(split_sentences("version 1.5 is out. ok"), ["version 1.5 is out. ok"]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn next_probability_formula() {
        assert!((compute_next_probability(7, 7).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(compute_next_probability(9, 0).unwrap(), 0.5);
        let p1 = compute_next_probability(100, 50).unwrap();
        assert!((p1 - 0.6).abs() < 1e-15);
        assert!((100.0 * p1 - 150.0 * (1.0 - p1)).abs() < 1e-9);
        assert!(compute_next_probability(0, 0).is_err());
    }

    #[test]
    fn two_single_sentence_docs_pair_as_not_next() {
        let docs = [doc("Alpha beta"), doc("Gamma delta")];
        let p1 = SentenceCorpus::new(&docs).next_probability().unwrap();
        let pairs = pair_sentences(&docs, p1, 3).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| !p.is_next));
        assert_eq!(pairs[0].second, "Gamma delta");
        assert_eq!(pairs[1].second, "Alpha beta");
    }

    #[test]
    fn lone_document_is_rejected() {
        assert!(pair_sentences(&[doc("Only one.")], 1.0, 0).is_err());
    }

    #[test]
    fn pairing_is_seeded() {
        let docs: Vec<Document> = (0..20)
            .map(|i| doc(&format!("Sentence {i} a. Sentence {i} b. Sentence {i} c.")))
            .collect();
        let a = pair_sentences(&docs, 0.5, 11).unwrap();
        assert_eq!(a, pair_sentences(&docs, 0.5, 11).unwrap());
        assert_ne!(a, pair_sentences(&docs, 0.5, 12).unwrap());
    }

    fn base_example(n_tokens: usize) -> PretrainExample {
        let mut ids = vec![CLS];
        ids.extend((0..n_tokens as u32).map(|i| 10 + i));
        ids.push(SEP);
        let seg = vec![0; ids.len()];
        PretrainExample {
            token_ids: ids,
            segment_ids: seg,
            is_next: 0,
            masked_positions: vec![],
            masked_labels: vec![],
        }
    }

    #[test]
    fn ceiling_mask_count() {
        let inst = make_masked_instances(&base_example(10), 1, 0.15, 100, 0).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].masked_positions.len(), 2);
    }

    #[test]
    fn masking_restores_and_avoids_specials() {
        let base = base_example(30);
        let inst = make_masked_instances(&base, 10, 0.15, 100, 5).unwrap();
        assert_eq!(inst.len(), 10);
        for i in &inst {
            assert_eq!(i.restored(), base.token_ids);
            assert!(i.masked_positions.iter().all(|&p| p != 0 && p != 31));
        }
        let no_mask = PretrainExample {
            token_ids: vec![CLS, SEP],
            ..base_example(0)
        };
        assert!(make_masked_instances(&no_mask, 1, 0.15, 100, 0).is_err());
        assert!(make_masked_instances(&base, 0, 0.15, 100, 0).is_err());
        assert!(make_masked_instances(&base, 1, 1.0, 100, 0).is_err());
    }

    #[test]
    fn finetune_truncation() {
        let tok = SubwordTokenizer::train(["a b c"], 261).unwrap();
        let ex = finetune_example(&tok, "a b c d e f g h", "news", 1, 6).unwrap();
        assert_eq!(ex.token_ids.len(), 6);
        assert_eq!(ex.token_ids[0], CLS);
        assert_eq!(ex.token_ids[5], SEP);
        assert!(finetune_example(&tok, "a", "news", 2, 6).is_err());
    }
}
