use proptest::prelude::*;
use qbert_core::dataprep::{
    compute_next_probability, make_masked_instances, pair_corpus, pair_tokens, prepare_pretraining, PrepareConfig,
    PretrainExample, SentenceCorpus, SentencePair,
};
use qbert_core::synth::{self, SynthConfig};
use qbert_core::tokenizer::{SubwordTokenizer, CLS, NUM_SPECIAL, SEP};

const VOCAB: usize = 300;

fn base(len_a: usize, len_b: usize) -> PretrainExample {
    let mut ids = vec![CLS];
    ids.extend((0..len_a).map(|i| NUM_SPECIAL + i as u32));
    ids.push(SEP);
    let boundary = ids.len();
    ids.extend((0..len_b).map(|i| NUM_SPECIAL + 50 + i as u32));
    ids.push(SEP);
    let segs = (0..ids.len()).map(|i| u8::from(i >= boundary)).collect();
    PretrainExample {
        token_ids: ids,
        segment_ids: segs,
        is_next: 1,
        masked_positions: vec![],
        masked_labels: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn masked_instances_keep_their_invariants(
        a in 1usize..40, b in 1usize..40, tau in 1usize..12, rate in 0.05f64..0.5, seed: u64,
    ) {
        let base = base(a, b);
        let inst = make_masked_instances(&base, tau, rate, VOCAB, seed).unwrap();
        prop_assert_eq!(inst.len(), tau);
        let maskable = a + b;
        let want = ((rate * maskable as f64).ceil() as usize).clamp(1, maskable);
        for x in &inst {
            prop_assert_eq!(x.restored(), base.token_ids.clone());
            prop_assert_eq!(x.masked_positions.len(), want);
            for &p in &x.masked_positions {
                prop_assert!(base.token_ids[p] != CLS && base.token_ids[p] != SEP);
            }
            prop_assert!(x.token_ids.iter().enumerate().all(|(i, &t)| (t == SEP || t == CLS) == (base.token_ids[i] == SEP || base.token_ids[i] == CLS)));
            prop_assert!(x.validate(base.token_ids.len(), VOCAB).is_ok());
        }
    }

    #[test]
    fn next_probability_balances_expectations(m in 0usize..5000, n in 0usize..5000) {
        prop_assume!(m + n > 0);
        let p1 = compute_next_probability(m, n).unwrap();
        let next = m as f64 * p1;
        let not_next = (m + n) as f64 * (1.0 - p1);
        prop_assert!((next - not_next).abs() <= 1e-9 * (m + n) as f64);
    }
}

fn fake_corpus(multi: usize, single: usize) -> SentenceCorpus {
    let docs = (0..multi + single)
        .map(|d| {
            let n = if d < multi { 2 + d % 3 } else { 1 };
            (0..n).map(|s| format!("doc {d} sentence {s}.")).collect()
        })
        .collect();
    SentenceCorpus::from_sentences(docs)
}

#[test]
fn empirical_pairs_are_balanced_within_two_sigma() {
    for (multi, single, seed) in [(5000, 5000, 1), (8000, 2000, 2), (2000, 8000, 3)] {
        let corpus = fake_corpus(multi, single);
        let p1 = corpus.next_probability().unwrap();
        let pairs = pair_corpus(&corpus, p1, seed).unwrap();
        let next = pairs.iter().filter(|p| p.is_next).count() as f64;
        let diff = next - (pairs.len() as f64 - next);
        // var of next minus not-next: +-1 per multi doc, 0/-1 per single doc
        let sigma = ((4 * multi + single) as f64 * p1 * (1.0 - p1)).sqrt();
        assert!(diff.abs() <= 2.0 * sigma, "M={multi} N={single}: diff {diff}, sigma {sigma}");
    }
}

#[test]
fn true_successors_are_consecutive() {
    let corpus = fake_corpus(50, 20);
    for p in pair_corpus(&corpus, 0.5, 4).unwrap() {
        let (d1, s1) = parse(&p.first);
        let (d2, s2) = parse(&p.second);
        if p.is_next {
            assert_eq!((d1, s1 + 1), (d2, s2));
        } else {
            assert_ne!(d1, d2);
        }
    }
}

fn parse(s: &str) -> (usize, usize) {
    let w: Vec<&str> = s.trim_end_matches('.').split(' ').collect();
    (w[1].parse().unwrap(), w[3].parse().unwrap())
}

#[test]
fn prepared_corpus_validates_and_scales_with_tau() {
    let docs = synth::generate(&SynthConfig { train: 300, dev: 0, test: 0, seed: 21, ..Default::default() }).train;
    let tok = SubwordTokenizer::train(docs.iter().map(|d| d.text.as_str()), 400).unwrap();
    let run = |tau| {
        let cfg = PrepareConfig { max_len: 32, tau, seed: 5, ..Default::default() };
        prepare_pretraining(&docs, &tok, &cfg).unwrap()
    };
    let (one, s1) = run(1);
    let (ten, s10) = run(10);
    assert_eq!(s1, s10);
    assert_eq!(one.len(), s1.pairs);
    assert_eq!(ten.len(), 10 * s10.pairs);
    for x in one.iter().chain(&ten) {
        x.validate(32, tok.vocab_size()).unwrap();
    }
    // each group of ten shares its unmasked sequence
    for (i, group) in ten.chunks(10).enumerate() {
        assert!(group.iter().all(|x| x.restored() == one[i].restored()));
    }
    assert_eq!(run(10).0, ten);
}

#[test]
fn long_pairs_are_trimmed_to_fit() {
    let docs = synth::generate(&SynthConfig { train: 50, dev: 0, test: 0, seed: 22, ..Default::default() }).train;
    let tok = SubwordTokenizer::train(docs.iter().map(|d| d.text.as_str()), 300).unwrap();
    let long = "word ".repeat(200);
    let pair = SentencePair { first: long.clone(), second: "short one.".into(), is_next: false };
    let ex = pair_tokens(&tok, &pair, 20).unwrap();
    assert_eq!(ex.token_ids.len(), 20);
    assert_eq!(ex.is_next, 0);
    assert!(ex.segment_ids.iter().filter(|&&s| s == 1).count() >= tok.encode("short one.").len().min(8));
}
