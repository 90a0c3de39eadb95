//! Synthetic two-source labelled corpus for end-to-end runs.
//!
//! Each document is one to three sentences. Every sentence carries marker
//! words drawn from its document's class pool, except that later markers
//! switch to the opposite pool with probability `overlap`. The first marker
//! of a document always belongs to its class.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataprep::Document;
use crate::rng::{self, derive_seed, Rng};

const POSITIVE: [&str; 12] = [
    "awful", "nasty", "vile", "hateful", "rotten", "disgusting", "worthless", "pathetic", "vicious", "stupid",
    "toxic", "filthy",
];
const NEGATIVE: [&str; 12] = [
    "lovely", "helpful", "kind", "thoughtful", "calm", "bright", "useful", "fair", "warm", "friendly", "honest",
    "gentle",
];
const NEWS_SUBJECTS: [&str; 8] = [
    "the council", "the mayor", "local police", "the reporter", "our editor", "the committee", "residents",
    "the minister",
];
const FINANCE_SUBJECTS: [&str; 8] = [
    "the bank", "investors", "the analyst", "shareholders", "the fund", "traders", "the board", "the lender",
];
const VERBS: [&str; 6] = ["said", "wrote", "called it", "described", "posted", "claimed"];
const NEWS_OBJECTS: [&str; 6] = ["the report", "the election", "the storm", "the parade", "the hearing", "the school"];
const FINANCE_OBJECTS: [&str; 6] = ["the earnings", "the shares", "the merger", "the forecast", "the rates", "the bonds"];

pub const SOURCES: [&str; 2] = ["news", "finance"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub positive_rate: f64,
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 2000,
            dev: 400,
            test: 600,
            positive_rate: 0.4,
            overlap: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut Rng, source: usize, label: u8, overlap: f64, first: bool) -> String {
    let (subjects, objects) = if source == 0 {
        (&NEWS_SUBJECTS, &NEWS_OBJECTS)
    } else {
        (&FINANCE_SUBJECTS, &FINANCE_OBJECTS)
    };
    let mut marker = |force: bool| {
        let own = if label == 1 { &POSITIVE } else { &NEGATIVE };
        let other = if label == 1 { &NEGATIVE } else { &POSITIVE };
        let pool = if !force && rng.random::<f64>() < overlap { other } else { own };
        *pool.choose(rng).expect("non-empty pool")
    };
    let m1 = marker(first);
    let m2 = marker(false);
    let subject = *subjects.choose(rng).expect("non-empty");
    let verb = *VERBS.choose(rng).expect("non-empty");
    let object = *objects.choose(rng).expect("non-empty");
    capitalize(&format!("{subject} {verb} {object} {m1} and {m2}."))
}

/// One labelled document. Deterministic in `(seed, index)`.
pub fn document(seed: u64, index: u64, cfg: &SynthConfig) -> Document {
    let mut rng = rng::seeded(derive_seed(seed, index));
    let source = rng.random_range(0..SOURCES.len());
    let label = u8::from(rng.random::<f64>() < cfg.positive_rate);
    let n = rng.random_range(1..=3);
    let text = (0..n)
        .map(|k| sentence(&mut rng, source, label, cfg.overlap, k == 0))
        .collect::<Vec<_>>()
        .join(" ");
    Document {
        text,
        source: SOURCES[source].into(),
        label: Some(label),
    }
}

pub fn generate(cfg: &SynthConfig) -> SynthDataset {
    let split = |k: u64, n: usize| -> Vec<Document> {
        let seed = derive_seed(cfg.seed, k);
        (0..n as u64).map(|i| document(seed, i, cfg)).collect()
    };
    SynthDataset {
        train: split(0, cfg.train),
        dev: split(1, cfg.dev),
        test: split(2, cfg.test),
    }
}
