//! Flat `key = value` run configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Unknown keys are
//! rejected so a typo never silently falls back to a default.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::marl::{MaxMaxSchedule, RewardWeights};
use crate::metrics::BocMatch;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory of a written corpus; empty means generate a synthetic one.
    pub corpus: String,
    pub size: usize,
    pub correlation: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub attribute_scale: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub counterexample_share: f64,
    pub min_train_counterexamples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: String::new(),
            size: 2000,
            correlation: 0.95,
            feature_dim: 32,
            noise_sigma: 0.1,
            attribute_scale: 1.0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            counterexample_share: 0.5,
            min_train_counterexamples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mle_epochs: usize,
    pub gumbel_start_epoch: usize,
    pub rl_epochs: usize,
    pub learning_rate: f64,
    /// Halve the learning rate after this many epochs without a CIDEr-D gain.
    pub lr_decay_patience: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    /// Share of examples that keep the gold BOC once Gumbel bridging is on.
    pub gold_mix: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mle_epochs: 20,
            gumbel_start_epoch: 10,
            rl_epochs: 15,
            learning_rate: 2e-3,
            lr_decay_patience: 2,
            min_lr: 5e-6,
            batch_size: 32,
            gold_mix: 0.5,
            tau_start: 1.0,
            tau_end: 0.3,
            clip_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub weights: RewardWeights,
    pub clip_norm: f64,
    pub schedule: MaxMaxSchedule,
    pub learning_rate: f64,
    pub boc_match: BocMatch,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            clip_norm: 5.0,
            schedule: MaxMaxSchedule::default(),
            learning_rate: 2e-4,
            boc_match: BocMatch::MicroF1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorTrainConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub random_pairs: usize,
    /// Training images used for the selector; 0 means the whole train split.
    pub train_images: usize,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            gamma1: 0.1,
            gamma2: 0.05,
            random_pairs: 2,
            train_images: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub candidates: usize,
    /// Cap on evaluated images per split; 0 means all.
    pub max_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            candidates: 20,
            max_images: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub rl: RlConfig,
    pub selector: SelectorTrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,

            "data.corpus" => self.data.corpus = v.to_string(),
            "data.size" => self.data.size = parse(key, v)?,
            "data.correlation" => self.data.correlation = parse(key, v)?,
            "data.feature_dim" => self.data.feature_dim = parse(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, v)?,
            "data.attribute_scale" => self.data.attribute_scale = parse(key, v)?,
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "data.val_fraction" => self.data.val_fraction = parse(key, v)?,
            "data.test_fraction" => self.data.test_fraction = parse(key, v)?,
            "data.counterexample_share" => self.data.counterexample_share = parse(key, v)?,
            "data.min_train_counterexamples" => self.data.min_train_counterexamples = parse(key, v)?,

            "model.dim" => self.model.model_dim = parse(key, v)?,
            "model.heads" => self.model.num_heads = parse(key, v)?,
            "model.layers" => self.model.num_layers = parse(key, v)?,
            "model.boc_tap" => self.model.boc_tap = parse(key, v)?,
            "model.mediator" => self.model.use_mediator = parse_bool(key, v)?,
            "model.confounder" => self.model.use_confounder = parse_bool(key, v)?,
            "model.z_dim" => self.model.z_dim = parse(key, v)?,
            "model.confounder_layers" => self.model.confounder_layers = parse(key, v)?,
            "model.proxy_concat" => self.model.proxy_concat = parse_bool(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.vocab_min_count" => self.model.vocab_min_count = parse(key, v)?,

            "train.mle_epochs" => self.train.mle_epochs = parse(key, v)?,
            "train.gumbel_start_epoch" => self.train.gumbel_start_epoch = parse(key, v)?,
            "train.rl_epochs" => self.train.rl_epochs = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.lr_decay_patience" => self.train.lr_decay_patience = parse(key, v)?,
            "train.min_lr" => self.train.min_lr = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.gold_mix" => self.train.gold_mix = parse(key, v)?,
            "train.tau_start" => self.train.tau_start = parse(key, v)?,
            "train.tau_end" => self.train.tau_end = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,

            "rl.lambda1" => self.rl.weights.lambda1 = parse(key, v)?,
            "rl.lambda2" => self.rl.weights.lambda2 = parse(key, v)?,
            "rl.clip_norm" => self.rl.clip_norm = parse(key, v)?,
            "rl.caption_epochs" => self.rl.schedule.caption_epochs = parse(key, v)?,
            "rl.boc_epochs" => self.rl.schedule.boc_epochs = parse(key, v)?,
            "rl.learning_rate" => self.rl.learning_rate = parse(key, v)?,
            "rl.boc_match" => {
                self.rl.boc_match = match v {
                    "micro_f1" => BocMatch::MicroF1,
                    "exact" => BocMatch::Exact,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for `{key}`"))),
                }
            }

            "selector.dim" => self.selector.dim = parse(key, v)?,
            "selector.heads" => self.selector.heads = parse(key, v)?,
            "selector.layers" => self.selector.layers = parse(key, v)?,
            "selector.epochs" => self.selector.epochs = parse(key, v)?,
            "selector.learning_rate" => self.selector.learning_rate = parse(key, v)?,
            "selector.batch_size" => self.selector.batch_size = parse(key, v)?,
            "selector.gamma1" => self.selector.gamma1 = parse(key, v)?,
            "selector.gamma2" => self.selector.gamma2 = parse(key, v)?,
            "selector.random_pairs" => self.selector.random_pairs = parse(key, v)?,
            "selector.train_images" => self.selector.train_images = parse(key, v)?,

            "eval.candidates" => self.eval.candidates = parse(key, v)?,
            "eval.max_images" => self.eval.max_images = parse(key, v)?,

            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let boc_match = match self.rl.boc_match {
            BocMatch::MicroF1 => "micro_f1",
            BocMatch::Exact => "exact",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("data.corpus", self.data.corpus.clone()),
            ("data.size", self.data.size.to_string()),
            ("data.correlation", self.data.correlation.to_string()),
            ("data.feature_dim", self.data.feature_dim.to_string()),
            ("data.noise_sigma", self.data.noise_sigma.to_string()),
            ("data.attribute_scale", self.data.attribute_scale.to_string()),
            ("data.train_fraction", self.data.train_fraction.to_string()),
            ("data.val_fraction", self.data.val_fraction.to_string()),
            ("data.test_fraction", self.data.test_fraction.to_string()),
            ("data.counterexample_share", self.data.counterexample_share.to_string()),
            ("data.min_train_counterexamples", self.data.min_train_counterexamples.to_string()),
            ("model.dim", self.model.model_dim.to_string()),
            ("model.heads", self.model.num_heads.to_string()),
            ("model.layers", self.model.num_layers.to_string()),
            ("model.boc_tap", self.model.boc_tap.to_string()),
            ("model.mediator", self.model.use_mediator.to_string()),
            ("model.confounder", self.model.use_confounder.to_string()),
            ("model.z_dim", self.model.z_dim.to_string()),
            ("model.confounder_layers", self.model.confounder_layers.to_string()),
            ("model.proxy_concat", self.model.proxy_concat.to_string()),
            ("model.max_len", self.model.max_len.to_string()),
            ("model.vocab_min_count", self.model.vocab_min_count.to_string()),
            ("train.mle_epochs", self.train.mle_epochs.to_string()),
            ("train.gumbel_start_epoch", self.train.gumbel_start_epoch.to_string()),
            ("train.rl_epochs", self.train.rl_epochs.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.lr_decay_patience", self.train.lr_decay_patience.to_string()),
            ("train.min_lr", self.train.min_lr.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.gold_mix", self.train.gold_mix.to_string()),
            ("train.tau_start", self.train.tau_start.to_string()),
            ("train.tau_end", self.train.tau_end.to_string()),
            ("train.clip_norm", self.train.clip_norm.to_string()),
            ("rl.lambda1", self.rl.weights.lambda1.to_string()),
            ("rl.lambda2", self.rl.weights.lambda2.to_string()),
            ("rl.clip_norm", self.rl.clip_norm.to_string()),
            ("rl.caption_epochs", self.rl.schedule.caption_epochs.to_string()),
            ("rl.boc_epochs", self.rl.schedule.boc_epochs.to_string()),
            ("rl.learning_rate", self.rl.learning_rate.to_string()),
            ("rl.boc_match", boc_match.to_string()),
            ("selector.dim", self.selector.dim.to_string()),
            ("selector.heads", self.selector.heads.to_string()),
            ("selector.layers", self.selector.layers.to_string()),
            ("selector.epochs", self.selector.epochs.to_string()),
            ("selector.learning_rate", self.selector.learning_rate.to_string()),
            ("selector.batch_size", self.selector.batch_size.to_string()),
            ("selector.gamma1", self.selector.gamma1.to_string()),
            ("selector.gamma2", self.selector.gamma2.to_string()),
            ("selector.random_pairs", self.selector.random_pairs.to_string()),
            ("selector.train_images", self.selector.train_images.to_string()),
            ("eval.candidates", self.eval.candidates.to_string()),
            ("eval.max_images", self.eval.max_images.to_string()),
        ]
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let cfg = Self::parse_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rl.weights.validate()?;
        let t = &self.train;
        if t.gumbel_start_epoch > t.mle_epochs {
            return Err(Error::Config(format!(
                "train.gumbel_start_epoch {} exceeds train.mle_epochs {}",
                t.gumbel_start_epoch, t.mle_epochs
            )));
        }
        if t.min_lr <= 0.0 || t.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.batch_size == 0 || self.selector.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.gold_mix) {
            return Err(Error::Config("train.gold_mix must lie in [0, 1]".into()));
        }
        if t.tau_start <= 0.0 || t.tau_end <= 0.0 {
            return Err(Error::Temperature(t.tau_start.min(t.tau_end)));
        }
        if self.eval.candidates == 0 {
            return Err(Error::Config("eval.candidates must be at least 1".into()));
        }
        Ok(())
    }
}
