//! Byte-level BPE tokenizer with a fixed special-token block.
//!
//! Text is lowercased and split on whitespace. The first word of a text is
//! encoded as-is and every later word carries a leading space byte, so
//! decoding is plain byte concatenation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
/// 256 byte symbols plus the specials.
pub const MIN_VOCAB: usize = 256 + NUM_SPECIAL as usize;

/// Ordered token table. Ids `0..5` are the specials, `5..261` the single
/// bytes, and everything after that a learned merge.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    ids: BTreeMap<Vec<u8>, u32>,
}

impl Vocab {
    fn bytes_only() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        let mut ids = BTreeMap::new();
        for b in 0..=255u8 {
            ids.insert(alloc::vec![b], tokens.len() as u32);
            tokens.push(alloc::vec![b]);
        }
        Vocab { tokens, ids }
    }

    fn push(&mut self, bytes: Vec<u8>) -> u32 {
        if let Some(&id) = self.ids.get(&bytes) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Id of a non-special token.
    pub fn id(&self, bytes: &[u8]) -> Option<u32> {
        self.ids.get(bytes).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordTokenizer {
    vocab: Vocab,
    merges: Vec<(u32, u32)>,
    ranks: BTreeMap<(u32, u32), (usize, u32)>,
}

fn byte_id(b: u8) -> u32 {
    NUM_SPECIAL + b as u32
}

/// Lowercased, whitespace-split chunks; all but the first get a leading space.
fn word_chunks(text: &str) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split_whitespace().enumerate().map(|(i, w)| {
        let lower = w.to_lowercase();
        let mut bytes = Vec::with_capacity(lower.len() + 1);
        if i > 0 {
            bytes.push(b' ');
        }
        bytes.extend_from_slice(lower.as_bytes());
        bytes
    })
}

impl SubwordTokenizer {
    /// Learns merges greedily by pair frequency until the vocabulary
    /// reaches `target_vocab` or no adjacent pair occurs twice. Ties go to
    /// the lexicographically smallest `(left bytes, right bytes)`.
    pub fn train<'a, I>(corpus: I, target_vocab: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_vocab < MIN_VOCAB {
            return Err(Error::Config(format!(
                "target vocabulary {target_vocab} is below the byte-level floor of {MIN_VOCAB}"
            )));
        }
        let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for doc in corpus {
            for chunk in word_chunks(doc) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("tokenizer corpus is empty".into()));
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.into_iter().map(byte_id).collect(), c))
            .collect();

        let mut vocab = Vocab::bytes_only();
        let mut merges = Vec::new();
        while vocab.len() < target_vocab {
            let mut pairs: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (vocab.token(pa.0), vocab.token(pa.1));
                    let kb = (vocab.token(pb.0), vocab.token(pb.1));
                    // smaller key wins the tie, so reverse for max_by
                    kb.cmp(&ka)
                })
            });
            let Some(((left, right), count)) = best else {
                break;
            };
            if count < 2 {
                break;
            }
            let mut bytes = vocab.token(left).expect("known").to_vec();
            bytes.extend_from_slice(vocab.token(right).expect("known"));
            let merged = vocab.push(bytes);
            merges.push((left, right));
            for (syms, _) in &mut words {
                apply_merge(syms, (left, right), merged);
            }
        }
        Self::assemble(vocab, merges)
    }

    fn assemble(vocab: Vocab, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut ranks = BTreeMap::new();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let (lb, rb) = match (vocab.token(l), vocab.token(r)) {
                (Some(lb), Some(rb)) if !Vocab::is_special(l) && !Vocab::is_special(r) => (lb, rb),
                _ => {
                    return Err(Error::Validation(format!(
                        "merge {rank} references an invalid token"
                    )))
                }
            };
            let mut bytes = lb.to_vec();
            bytes.extend_from_slice(rb);
            let merged = vocab.id(&bytes).ok_or_else(|| {
                Error::Validation(format!("merge {rank} produces a token missing from the vocab"))
            })?;
            ranks.entry((l, r)).or_insert((rank, merged));
        }
        Ok(SubwordTokenizer {
            vocab,
            merges,
            ranks,
        })
    }

    /// Rebuilds a tokenizer from its serialized parts: the full token list
    /// (specials first, then the 256 bytes, then merged tokens) and the
    /// merge list.
    pub fn from_parts(tokens: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB {
            return Err(Error::Validation(format!(
                "vocab has {} tokens, fewer than the {MIN_VOCAB} base symbols",
                tokens.len()
            )));
        }
        let base = Vocab::bytes_only();
        if tokens[..MIN_VOCAB] != base.tokens[..] {
            return Err(Error::Validation(
                "special and byte tokens are not in canonical order".into(),
            ));
        }
        let mut vocab = base;
        for t in tokens.into_iter().skip(MIN_VOCAB) {
            let before = vocab.len();
            if vocab.push(t) as usize != before {
                return Err(Error::Validation("duplicate token in vocab".into()));
            }
        }
        Self::assemble(vocab, merges)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in word_chunks(text) {
            let mut syms: Vec<u32> = chunk.into_iter().map(byte_id).collect();
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                    .min_by_key(|&(rank, _, _)| rank);
                let Some((_, pair, id)) = best else {
                    break;
                };
                apply_merge(&mut syms, pair, id);
            }
            out.extend(syms);
        }
        out
    }

    /// Concatenates token bytes, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                bound: self.vocab.len(),
            })?;
            if !Vocab::is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn apply_merge(syms: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_merge_on_tiny_corpus() {
        // chunks "aaaa" and " aaaa": (a,a) occurs 6 times, (" ",a) once
        let tok = SubwordTokenizer::train(["aaaa aaaa"], 262).unwrap();
        let a = byte_id(b'a');
        assert_eq!(tok.merges(), &[(a, a)]);
        assert_eq!(tok.vocab_size(), 262);
        let aa = tok.vocab().id(b"aa").unwrap();
        assert_eq!(tok.encode("aaaa"), vec![aa, aa]);
    }

    #[test]
    fn byte_floor() {
        let tok = SubwordTokenizer::train(["hello hello"], MIN_VOCAB).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.vocab_size(), MIN_VOCAB);
        assert!(matches!(
            SubwordTokenizer::train(["x"], 260),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SubwordTokenizer::train(["   "], 300),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the dog sat on the log"];
        let a = SubwordTokenizer::train(corpus, 300).unwrap();
        let b = SubwordTokenizer::train(corpus, 300).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn round_trips_and_specials() {
        let tok = SubwordTokenizer::train(["hello world hello there"], 300).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert_eq!(tok.decode(&tok.encode("hello world")).unwrap(), "hello world");
        assert_eq!(tok.decode(&tok.encode("Hello  WORLD")).unwrap(), "hello world");
        let mut ids = vec![CLS];
        ids.extend(tok.encode("hello"));
        ids.push(SEP);
        assert_eq!(tok.decode(&ids).unwrap(), "hello");
        assert!(matches!(
            tok.decode(&[tok.vocab_size() as u32]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn novel_words_never_fail() {
        let tok = SubwordTokenizer::train(["kind words only"], 280).unwrap();
        let ids = tok.encode("d1cked");
        assert!(!ids.is_empty());
        assert_eq!(tok.decode(&ids).unwrap(), "d1cked");
    }

    #[test]
    fn from_parts_rebuilds() {
        let tok = SubwordTokenizer::train(["abab abab cdcd"], 270).unwrap();
        let again =
            SubwordTokenizer::from_parts(tok.vocab().tokens().to_vec(), tok.merges().to_vec())
                .unwrap();
        assert_eq!(tok, again);
    }
}
