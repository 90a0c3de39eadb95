//! Run configuration: one JSON file, overridden field by field with dotted
//! flags such as `--model.H 384` or `--finetune.adv.lambda_adv 0`.

use std::fs;
use std::path::{Path, PathBuf};

use qbert_core::dataprep::{DEFAULT_MASK_RATE, DEFAULT_TAU};
use qbert_core::model::ModelConfig;
use qbert_core::training::AdversarialConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Input locations. Unset paths fall back to the standard file names
/// inside the output directory, so stages chain with a shared `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pretrain: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub positive_rate: f64,
    pub overlap: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = qbert_core::synth::SynthConfig::default();
        SynthSettings {
            train: d.train,
            dev: d.dev,
            test: d.test,
            positive_rate: d.positive_rate,
            overlap: d.overlap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub path: Option<PathBuf>,
    pub vocab_size: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            path: None,
            vocab_size: 40_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSettings {
    pub tau: usize,
    pub mask_rate: f64,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            tau: DEFAULT_TAU,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// When set, replaces `steps` with whole passes over the data.
    pub epochs: Option<usize>,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings::with_steps(1e-3, 200)
    }
}

impl StageSettings {
    fn with_steps(lr: f64, steps: usize) -> Self {
        StageSettings {
            lr,
            batch_size: 16,
            steps,
            epochs: None,
            checkpoint_every: 0,
        }
    }

    pub fn total_steps(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size),
            None => self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub epochs: Option<usize>,
    pub checkpoint_every: usize,
    /// Pretrained checkpoint to start from; unset means a cold start.
    pub init: Option<PathBuf>,
    pub adversarial: bool,
    pub adv: AdversarialConfig,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let s = StageSettings::with_steps(1e-3, 300);
        FinetuneSettings {
            lr: s.lr,
            batch_size: s.batch_size,
            steps: s.steps,
            epochs: s.epochs,
            checkpoint_every: s.checkpoint_every,
            init: None,
            adversarial: false,
            adv: AdversarialConfig::default(),
        }
    }
}

impl FinetuneSettings {
    pub fn stage(&self) -> StageSettings {
        StageSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            epochs: self.epochs,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `V` is always taken from the tokenizer when a model is built.
    pub model: ModelConfig,
    pub data: DataPaths,
    pub synth: SynthSettings,
    pub tokenizer: TokenizerSettings,
    pub prepare: PrepareSettings,
    pub pretrain: StageSettings,
    pub finetune: FinetuneSettings,
    /// Trained model for `evaluate` and `predict`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(40_000),
            data: DataPaths::default(),
            synth: SynthSettings::default(),
            tokenizer: TokenizerSettings::default(),
            prepare: PrepareSettings::default(),
            pretrain: StageSettings::default(),
            finetune: FinetuneSettings::default(),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Fields missing from the file keep their defaults, at any depth.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::parse(path, e.line(), e.to_string()))?;
        let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut tree, file);
        serde_json::from_value(tree).map_err(|e| CliError::parse(path, 0, e.to_string()))
    }

    /// Applies `(dotted.path, value)` overrides in order. A value is read as
    /// JSON when it parses, otherwise as a string. Overriding `model.H`
    /// without `model.F` keeps `F = 4H`.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for (path, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut tree, path, value)?;
        }
        let sets = |p: &str| overrides.iter().any(|(k, _)| k == p);
        if sets("model.H") && !sets("model.F") {
            let h = tree["model"]["H"].clone();
            if let Some(h) = h.as_u64() {
                tree["model"]["F"] = Value::from(4 * h);
            }
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        for (name, s) in [("pretrain", self.pretrain.clone()), ("finetune", self.finetune.stage())] {
            if s.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return bad(format!("{name}.lr must be positive, got {}", s.lr));
            }
        }
        if self.prepare.tau == 0 {
            return bad("prepare.tau must be at least 1".into());
        }
        if !(self.prepare.mask_rate > 0.0 && self.prepare.mask_rate < 1.0) {
            return bad(format!("prepare.mask_rate must lie in (0, 1), got {}", self.prepare.mask_rate));
        }
        let adv = &self.finetune.adv;
        if !(adv.a > 0.0 && adv.a <= adv.b && adv.b.is_finite()) {
            return bad(format!("finetune.adv needs 0 < a <= b, got a = {}, b = {}", adv.a, adv.b));
        }
        if adv.lambda_adv < 0.0 || adv.lambda_eps < 0.0 || adv.eps_lr <= 0.0 {
            return bad("finetune.adv weights must be non-negative and eps_lr positive".into());
        }
        if !(0.0..=1.0).contains(&self.synth.positive_rate) || !(0.0..=1.0).contains(&self.synth.overlap) {
            return bad("synth.positive_rate and synth.overlap must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--{path}: `{}` is not a section", parts[..i].join("."))))?;
        let child = obj
            .get_mut(*key)
            .ok_or_else(|| CliError::Usage(format!("--{path}: unknown config field `{key}`")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list,
/// leaving everything else for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
            overrides.push((flag.to_string(), v));
        }
    }
    Ok((rest, overrides))
}
