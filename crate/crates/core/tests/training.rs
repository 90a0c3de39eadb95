use qbert_core::dataprep::{finetune_example, make_masked_instances, pair_tokens, FinetuneExample, PretrainExample, SentencePair};
use qbert_core::model::{count_params, CountMode, Model, ModelConfig};
use qbert_core::synth::{self, SynthConfig};
use qbert_core::tensor::AdamConfig;
use qbert_core::tokenizer::SubwordTokenizer;
use qbert_core::training::{
    adversarial_directions, predict_perturbed, update_epsilon, AdversarialConfig, BatchSampler, NoiseMagnitude,
    TrainState,
};

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 16,
        hidden: 32,
        attn_dim: 16,
        inter_dim: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 128,
        max_len: 48,
        ..ModelConfig::reference()
    }
}

fn corpus(n: usize, overlap: f64, seed: u64) -> (SubwordTokenizer, Vec<FinetuneExample>) {
    let cfg = SynthConfig {
        train: n,
        dev: 0,
        test: 0,
        overlap,
        seed,
        ..Default::default()
    };
    let docs = synth::generate(&cfg).train;
    let tok = SubwordTokenizer::train(docs.iter().map(|d| d.text.as_str()), 400).unwrap();
    let ex = docs
        .iter()
        .map(|d| finetune_example(&tok, &d.text, &d.source, d.label.unwrap(), 48).unwrap())
        .collect();
    (tok, ex)
}

fn accuracy(m: &Model, ex: &[FinetuneExample]) -> f64 {
    let hits = ex
        .iter()
        .filter(|e| (m.predict(e).unwrap() >= 0.5) == (e.label == 1))
        .count();
    hits as f64 / ex.len() as f64
}

fn finetune(state: &mut TrainState, ex: &[FinetuneExample], steps: usize, batch: usize) {
    let mut sampler = BatchSampler::new(ex.len(), batch, state.seed).unwrap();
    for _ in 0..steps {
        let b: Vec<FinetuneExample> = sampler.next_batch().into_iter().map(|i| ex[i].clone()).collect();
        state.finetune_step(&b).unwrap();
    }
}

#[test]
fn memorizes_a_small_pretraining_corpus() {
    let (tok, _) = corpus(40, 0.1, 1);
    let docs = synth::generate(&SynthConfig { train: 64, dev: 0, test: 0, seed: 2, ..Default::default() }).train;
    let examples: Vec<PretrainExample> = docs
        .windows(2)
        .take(64)
        .enumerate()
        .map(|(i, w)| {
            let pair = SentencePair {
                first: w[0].text.clone(),
                second: w[1].text.clone(),
                is_next: i % 2 == 0,
            };
            let base = pair_tokens(&tok, &pair, 24).unwrap();
            make_masked_instances(&base, 1, 0.15, tok.vocab_size(), i as u64).unwrap().remove(0)
        })
        .collect();
    let model = Model::build(ModelConfig { max_len: 48, ..ModelConfig::desk(tok.vocab_size()) }, 0).unwrap();
    let mut st = TrainState::new(model, AdamConfig::with_lr(3e-3), 0);
    let mut sampler = BatchSampler::new(examples.len(), 16, 0).unwrap();
    let mut totals = Vec::new();
    for _ in 0..200 {
        let b: Vec<PretrainExample> = sampler.next_batch().into_iter().map(|i| examples[i].clone()).collect();
        totals.push(st.pretrain_step(&b).unwrap().total);
    }
    let head: f64 = totals[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = totals[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head / 4.0, "loss {head} -> {tail}");
    let acc = qbert_core::training::mlm_accuracy(&st.model, &examples).unwrap();
    assert!(acc > 0.99, "masked-token accuracy {acc}");
}

#[test]
fn separable_data_is_learned() {
    let (tok, ex) = corpus(200, 0.0, 3);
    let model = Model::build(small(tok.vocab_size()), 1).unwrap();
    let mut st = TrainState::new(model, AdamConfig::with_lr(1e-3), 1);
    finetune(&mut st, &ex, 300, 16);
    let acc = accuracy(&st.model, &ex);
    assert!(acc > 0.99, "training accuracy {acc}");
}

#[test]
fn loss_baselines_on_a_fresh_model() {
    let (tok, ex) = corpus(60, 0.1, 4);
    let model = Model::build(small(tok.vocab_size()), 2).unwrap();
    let mut s = model.session(false);
    let l = qbert_core::training::finetune_loss(&mut s, &ex, None, &ex.iter().map(|e| f64::from(e.label)).collect::<Vec<_>>()).unwrap();
    assert!((s.tape.data(l)[0] - 2f64.ln()).abs() < 0.1);
}

#[test]
fn seeded_runs_repeat_bit_for_bit() {
    let (tok, ex) = corpus(60, 0.1, 5);
    let run = || {
        let mut st = TrainState::new(Model::build(small(tok.vocab_size()), 7).unwrap(), AdamConfig::with_lr(1e-3), 7);
        finetune(&mut st, &ex, 10, 8);
        st.history.iter().map(|r| r.l_hs.unwrap().to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_adversarial_weight_reproduces_plain_finetuning() {
    let (tok, ex) = corpus(60, 0.1, 6);
    let model = Model::build(small(tok.vocab_size()), 3).unwrap();
    let mut plain = TrainState::new(model.clone(), AdamConfig::with_lr(1e-3), 3);
    let mut adv = TrainState::new(model, AdamConfig::with_lr(1e-3), 3);
    let cfg = AdversarialConfig {
        lambda_adv: 0.0,
        ..Default::default()
    };
    let mut eps = NoiseMagnitude::new(32, cfg.a, cfg.b, cfg.eps_lr).unwrap();
    let mut sampler = BatchSampler::new(ex.len(), 8, 3).unwrap();
    for _ in 0..8 {
        let b: Vec<FinetuneExample> = sampler.next_batch().into_iter().map(|i| ex[i].clone()).collect();
        let a = plain.finetune_step(&b).unwrap();
        let r = adv.adversarial_finetune_step(&b, &mut eps, &cfg).unwrap();
        assert_eq!(a.to_bits(), r.l_hs.to_bits());
        assert_eq!(plain.model.params(), adv.model.params());
    }
}

#[test]
fn strong_norm_reward_drives_epsilon_to_the_upper_bound() {
    let (tok, ex) = corpus(20, 0.1, 7);
    let model = Model::build(small(tok.vocab_size()), 4).unwrap();
    let mut eps = NoiseMagnitude::new(32, 1.0, 2.0, 0.05).unwrap();
    for _ in 0..40 {
        update_epsilon(&model, &ex[..8], &mut eps, 100.0).unwrap();
        let (a, b) = eps.bounds();
        assert!(eps.values().iter().all(|&e| (a..=b).contains(&e)));
    }
    assert!(eps.values().iter().all(|&e| e == 2.0), "{:?}", eps.values());
}

#[test]
fn adversarial_direction_raises_the_wrong_class() {
    let (tok, ex) = corpus(200, 0.1, 8);
    let model = Model::build(small(tok.vocab_size()), 5).unwrap();
    let mut st = TrainState::new(model, AdamConfig::with_lr(1e-3), 5);
    finetune(&mut st, &ex, 150, 16);
    let probes = &ex[..100];
    let dirs = adversarial_directions(&st.model, probes).unwrap();
    let mut good = 0;
    for (e, d) in probes.iter().zip(&dirs) {
        let target_loss = |p: f64| if e.label == 1 { -(1.0 - p).ln() } else { -p.ln() };
        let clean = st.model.predict(e).unwrap();
        let noise = d.delta(&[0.05; 32]);
        let moved = predict_perturbed(&st.model, e, &noise).unwrap();
        good += usize::from(target_loss(moved) < target_loss(clean));
    }
    assert!(good >= 95, "{good} of 100 probes descend");
}

#[test]
fn adversarial_training_adds_no_parameters() {
    let (tok, ex) = corpus(30, 0.1, 9);
    let model = Model::build(small(tok.vocab_size()), 6).unwrap();
    let before = model.num_params();
    let mut st = TrainState::new(model, AdamConfig::with_lr(1e-3), 6);
    let cfg = AdversarialConfig::default();
    let mut eps = NoiseMagnitude::new(32, cfg.a, cfg.b, cfg.eps_lr).unwrap();
    st.adversarial_finetune_step(&ex[..8], &mut eps, &cfg).unwrap();
    assert_eq!(st.model.num_params(), before);
    assert_eq!(st.model.num_params() as u64, count_params(st.model.config(), CountMode::Exact));
    let rec = st.history.last().unwrap();
    assert!(rec.eps_min.unwrap() >= 1.0 && rec.eps_max.unwrap() <= 2.0);
}
