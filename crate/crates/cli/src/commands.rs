use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qbert_core::dataprep::{finetune_example, prepare_pretraining, Document, FinetuneExample, PrepareConfig, PretrainExample};
use qbert_core::metrics::{report, select_threshold, Report, ScoredSet};
use qbert_core::model::{count_params, CountMode, Model, ModelConfig};
use qbert_core::rng::derive_seed;
use qbert_core::synth::{self, SynthConfig};
use qbert_core::tensor::AdamConfig;
use qbert_core::tokenizer::SubwordTokenizer;
use qbert_core::training::{BatchSampler, NoiseMagnitude, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, StageSettings};
use crate::error::{CliError, Result};
use crate::formats::{read_jsonl, read_lines, read_tokenizer, write_jsonl, write_text, write_tokenizer};

// seed streams for the independent random choices of a run
const PREPARE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;
const FINETUNE_STREAM: u64 = 4;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    fn input(&self, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
        let p = explicit.clone().unwrap_or_else(|| self.out.join(default_name));
        if !p.exists() {
            return Err(CliError::Usage(format!("{}: not found", p.display())));
        }
        Ok(p)
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn tokenizer(&self) -> Result<SubwordTokenizer> {
        read_tokenizer(&self.input(&self.config.tokenizer.path, "tokenizer.txt")?)
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.config.seed, stream)
    }

    /// The configured architecture sized to the tokenizer's vocabulary.
    fn model_config(&self, tok: &SubwordTokenizer) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            ..self.config.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let s = &ctx.config.synth;
    let data = synth::generate(&SynthConfig {
        train: s.train,
        dev: s.dev,
        test: s.test,
        positive_rate: s.positive_rate,
        overlap: s.overlap,
        seed: ctx.config.seed,
    });
    write_jsonl(&ctx.output("train.jsonl"), &data.train)?;
    write_jsonl(&ctx.output("dev.jsonl"), &data.dev)?;
    write_jsonl(&ctx.output("test.jsonl"), &data.test)?;
    let corpus: String = data.train.iter().map(|d| format!("{}\n", d.text)).collect();
    write_text(&ctx.output("corpus.txt"), &corpus)?;
    println!(
        "wrote {} train, {} dev and {} test records to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        ctx.out.display()
    );
    Ok(())
}

pub fn train_tokenizer(ctx: &Context) -> Result<()> {
    let corpus = read_lines(&ctx.input(&ctx.config.data.corpus, "corpus.txt")?)?;
    let tok = SubwordTokenizer::train(corpus.iter().map(String::as_str), ctx.config.tokenizer.vocab_size)?;
    let path = ctx.output("tokenizer.txt");
    write_tokenizer(&path, &tok)?;
    println!("vocab size {} ({} merges) written to {}", tok.vocab_size(), tok.merges().len(), path.display());
    Ok(())
}

pub fn prepare(ctx: &Context) -> Result<()> {
    let corpus = read_lines(&ctx.input(&ctx.config.data.corpus, "corpus.txt")?)?;
    let tok = ctx.tokenizer()?;
    let docs: Vec<Document> = corpus
        .into_iter()
        .map(|text| Document {
            text,
            source: String::new(),
            label: None,
        })
        .collect();
    let cfg = PrepareConfig {
        max_len: ctx.config.model.max_len,
        tau: ctx.config.prepare.tau,
        mask_rate: ctx.config.prepare.mask_rate,
        seed: ctx.seed(PREPARE_STREAM),
    };
    let (records, stats) = prepare_pretraining(&docs, &tok, &cfg)?;
    write_jsonl(&ctx.output("pretrain.jsonl"), &records)?;
    println!("M = {}, N = {}, p1 = {:.4}", stats.multi, stats.single, stats.p1);
    println!(
        "pairs = {}, next = {}, not_next = {}, records = {}",
        stats.pairs,
        stats.next,
        stats.not_next,
        records.len()
    );
    Ok(())
}

fn read_pretrain(path: &Path, max_len: usize, vocab: usize) -> Result<Vec<PretrainExample>> {
    let records: Vec<PretrainExample> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate(max_len, vocab).map_err(|e| CliError::parse(path, i + 1, e.to_string()))?;
    }
    if records.is_empty() {
        return Err(CliError::parse(path, 0, "no pretraining records"));
    }
    Ok(records)
}

fn read_labeled(path: &Path, tok: &SubwordTokenizer, max_len: usize, need_label: bool) -> Result<Vec<FinetuneExample>> {
    let docs: Vec<Document> = read_jsonl(path)?;
    if docs.is_empty() {
        return Err(CliError::parse(path, 0, "no records"));
    }
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let label = match d.label {
                Some(l) => l,
                None if need_label => return Err(CliError::parse(path, i + 1, "missing label")),
                None => 0,
            };
            finetune_example(tok, &d.text, &d.source, label, max_len).map_err(|e| CliError::parse(path, i + 1, e.to_string()))
        })
        .collect()
}

fn progress_every(steps: usize) -> usize {
    (steps / 10).max(1)
}

/// Runs `steps` mini-batches through `step`, saving numbered checkpoints
/// along the way when asked to.
fn run_stage<T: Clone>(
    ctx: &Context,
    name: &str,
    state: &mut TrainState,
    data: &[T],
    stage: &StageSettings,
    mut step: impl FnMut(&mut TrainState, &[T]) -> Result<String>,
) -> Result<()> {
    let steps = stage.total_steps(data.len());
    let mut sampler = BatchSampler::new(data.len(), stage.batch_size, state.seed)?;
    for k in 1..=steps {
        let batch: Vec<T> = sampler.next_batch().into_iter().map(|i| data[i].clone()).collect();
        let line = step(state, &batch)?;
        if k % progress_every(steps) == 0 || k == steps {
            eprintln!("{name} step {k}/{steps}: {line}");
        }
        if stage.checkpoint_every > 0 && k % stage.checkpoint_every == 0 {
            checkpoint::save(&state.model, &ctx.output(&format!("checkpoints/{name}-{k:06}.qbt")))?;
        }
    }
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<()> {
    let tok = ctx.tokenizer()?;
    let cfg = ctx.model_config(&tok)?;
    let data = read_pretrain(&ctx.input(&ctx.config.data.pretrain, "pretrain.jsonl")?, cfg.max_len, cfg.vocab_size)?;
    let model = Model::build(cfg, ctx.seed(INIT_STREAM))?;
    let stage = &ctx.config.pretrain;
    let mut state = TrainState::new(model, AdamConfig::with_lr(stage.lr), ctx.seed(PRETRAIN_STREAM));
    run_stage(ctx, "pretrain", &mut state, &data, stage, |st, b| {
        let l = st.pretrain_step(b)?;
        Ok(format!("L1 {:.4} L2 {:.4}", l.l1, l.l2))
    })?;
    checkpoint::save(&state.model, &ctx.output("pretrain.qbt"))?;
    write_jsonl(&ctx.output("pretrain_metrics.jsonl"), &state.history)?;
    println!("pretrained {} parameters for {} steps", state.model.num_params(), state.step);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct NoiseFile {
    a: f64,
    b: f64,
    values: Vec<f64>,
}

pub fn finetune(ctx: &Context) -> Result<()> {
    let tok = ctx.tokenizer()?;
    let cfg = ctx.model_config(&tok)?;
    let ft = &ctx.config.finetune;
    let data = read_labeled(&ctx.input(&ctx.config.data.train, "train.jsonl")?, &tok, cfg.max_len, true)?;
    let model = match &ft.init {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("{}: checkpoint not found", p.display())));
            }
            checkpoint::load_as(p, &cfg)?
        }
        None => {
            eprintln!("warning: no pretrained checkpoint given, fine-tuning from a random initialization");
            Model::build(cfg.clone(), ctx.seed(INIT_STREAM))?
        }
    };
    let mut state = TrainState::new(model, AdamConfig::with_lr(ft.lr), ctx.seed(FINETUNE_STREAM));
    if ft.adversarial {
        let adv = ft.adv;
        let mut eps = NoiseMagnitude::new(cfg.hidden, adv.a, adv.b, adv.eps_lr)?;
        run_stage(ctx, "finetune", &mut state, &data, &ft.stage(), |st, b| {
            let l = st.adversarial_finetune_step(b, &mut eps, &adv)?;
            Ok(format!("L_hs {:.4} L_robust {:.4} eps mean {:.4}", l.l_hs, l.l_robust, eps.mean()))
        })?;
        let noise = NoiseFile {
            a: adv.a,
            b: adv.b,
            values: eps.values().to_vec(),
        };
        write_text(&ctx.output("noise.json"), &serde_json::to_string_pretty(&noise).expect("serializes"))?;
    } else {
        run_stage(ctx, "finetune", &mut state, &data, &ft.stage(), |st, b| {
            Ok(format!("L_hs {:.4}", st.finetune_step(b)?))
        })?;
    }
    checkpoint::save(&state.model, &ctx.output("finetune.qbt"))?;
    write_jsonl(&ctx.output("finetune_metrics.jsonl"), &state.history)?;
    println!("fine-tuned for {} steps", state.step);
    Ok(())
}

fn trained_model(ctx: &Context) -> Result<Model> {
    let p = ctx.input(&ctx.config.checkpoint, "finetune.qbt")?;
    checkpoint::load(&p)
}

fn score(model: &Model, examples: &[FinetuneExample]) -> Result<Vec<f64>> {
    Ok(examples.iter().map(|e| model.predict(e)).collect::<qbert_core::Result<_>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Decision threshold chosen on the dev split.
    pub threshold: f64,
    pub overall: Report,
    /// `null` where a source's test records hold a single class.
    pub per_source: BTreeMap<String, Option<Report>>,
}

pub struct Scored<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [u8],
    pub sources: &'a [String],
}

pub fn build_report(dev: Scored<'_>, test: Scored<'_>) -> Result<EvalReport> {
    let threshold = select_threshold(&ScoredSet::new(dev.scores.to_vec(), dev.labels.to_vec())?)?;
    let overall = report(&ScoredSet::new(test.scores.to_vec(), test.labels.to_vec())?, threshold)?;
    let mut per_source = BTreeMap::new();
    for src in test.sources {
        if per_source.contains_key(src) {
            continue;
        }
        let (s, l): (Vec<f64>, Vec<u8>) = (0..test.scores.len())
            .filter(|&i| &test.sources[i] == src)
            .map(|i| (test.scores[i], test.labels[i]))
            .unzip();
        let r = match report(&ScoredSet::new(s, l)?, threshold) {
            Ok(r) => Some(r),
            Err(qbert_core::Error::MetricUndefined(_)) => None,
            Err(e) => return Err(e.into()),
        };
        per_source.insert(src.clone(), r);
    }
    Ok(EvalReport {
        threshold,
        overall,
        per_source,
    })
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let model = trained_model(ctx)?;
    let tok = ctx.tokenizer()?;
    let max_len = model.config().max_len;
    let dev = read_labeled(&ctx.input(&ctx.config.data.dev, "dev.jsonl")?, &tok, max_len, true)?;
    let test = read_labeled(&ctx.input(&ctx.config.data.test, "test.jsonl")?, &tok, max_len, true)?;
    let (dev_scores, test_scores) = (score(&model, &dev)?, score(&model, &test)?);
    let labels = |x: &[FinetuneExample]| x.iter().map(|e| e.label).collect::<Vec<_>>();
    let sources = |x: &[FinetuneExample]| x.iter().map(|e| e.source.clone()).collect::<Vec<_>>();
    let rep = build_report(
        Scored {
            scores: &dev_scores,
            labels: &labels(&dev),
            sources: &sources(&dev),
        },
        Scored {
            scores: &test_scores,
            labels: &labels(&test),
            sources: &sources(&test),
        },
    )?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    write_text(&ctx.output("report.json"), &format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    source: &'a str,
    probability: f64,
}

pub fn predict(ctx: &Context) -> Result<()> {
    let model = trained_model(ctx)?;
    let tok = ctx.tokenizer()?;
    let path = ctx
        .config
        .data
        .input
        .clone()
        .ok_or_else(|| CliError::Usage("predict needs --input PATH (or data.input)".into()))?;
    let input = ctx.input(&Some(path), "")?;
    let examples = read_labeled(&input, &tok, model.config().max_len, false)?;
    let probs = score(&model, &examples)?;
    let rows: Vec<Prediction<'_>> = examples
        .iter()
        .zip(&probs)
        .map(|(e, &p)| Prediction {
            source: &e.source,
            probability: p,
        })
        .collect();
    let out = ctx.output("predictions.jsonl");
    write_jsonl(&out, &rows)?;
    println!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}

/// `1234567` as `1,234,567`.
pub fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn count_params_table(cfg: &ModelConfig) -> String {
    let mut s = format!(
        "V={} E={} H={} C={} I={} L={}\n{:<4}{:<4}{:<4}{:<4}{:>14}{:>14}\n",
        cfg.vocab_size, cfg.embed_dim, cfg.hidden, cfg.attn_dim, cfg.inter_dim, cfg.layers, "VF", "AF", "FF", "OF", "formula", "exact"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for bits in 0..16u8 {
        let (v, a, f, o) = (bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let c = cfg.clone().with_factorizations(v, a, f, o);
        s.push_str(&format!(
            "{:<4}{:<4}{:<4}{:<4}{:>14}{:>14}\n",
            mark(v),
            mark(a),
            mark(f),
            mark(o),
            grouped(count_params(&c, CountMode::Formula)),
            grouped(count_params(&c, CountMode::Exact))
        ));
    }
    s
}

pub fn count(ctx: &Context, reference: bool) -> Result<()> {
    let cfg = if reference {
        ModelConfig::reference()
    } else {
        ctx.config.model.clone()
    };
    print!("{}", count_params_table(&cfg));
    Ok(())
}
