//! Flat `key=value` run configuration with named presets.
//!
//! A config file is a list of `key=value` lines; `#` starts a comment. An
//! optional `preset=<name>` line selects the defaults the remaining keys
//! override, wherever it appears in the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Selector};
use crate::styledata::NoiseRates;
use crate::training::{AdamWConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected toy or paper)"
            ))),
        }
    }
}

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,

    /// Master seed; corpora and training runs derive their seeds from it.
    pub seed: u64,
    pub task_pairs: usize,
    pub style_sentences: usize,
    pub noise: NoiseRates,

    pub pretrain_sentences: usize,
    pub pretrain_epochs: usize,
    pub pretrain_noise: NoiseRates,

    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub adapter_epochs: usize,
    pub task_epochs: usize,
    pub patience: usize,
    pub max_valid: usize,
    pub trainable: Selector,

    pub beam_size: usize,
    pub decode_max_len: usize,
    pub length_penalty: f64,

    /// Held-out examples decoded per evaluation; 0 means the whole test split.
    pub eval_examples: usize,
    pub lm_k: f64,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let toy = Self {
            preset: Preset::Toy,
            model: ModelConfig::default(),
            seed: 1,
            task_pairs: 10_000,
            style_sentences: 10_000,
            noise: NoiseRates::default(),
            pretrain_sentences: 30_000,
            pretrain_epochs: 12,
            pretrain_noise: NoiseRates {
                mask: 0.25,
                delete: 0.20,
            },
            optim: AdamWConfig::default(),
            batch_size: 8,
            adapter_epochs: 5,
            task_epochs: 12,
            patience: 2,
            max_valid: 200,
            trainable: Selector::Enc,
            beam_size: 4,
            decode_max_len: 24,
            length_penalty: 0.0,
            eval_examples: 0,
            lm_k: 0.1,
        };
        match p {
            Preset::Toy => toy,
            Preset::Paper => Self {
                preset: Preset::Paper,
                model: ModelConfig {
                    adapter_bottleneck: 64,
                    ..toy.model
                },
                optim: AdamWConfig { lr: 5e-5, ..toy.optim },
                batch_size: 8,
                beam_size: 4,
                ..toy
            },
        }
    }

    /// Training settings for one stage, with a stage-specific seed.
    pub fn train_config(&self, epochs: usize, seed_offset: u64) -> TrainConfig {
        TrainConfig {
            optim: self.optim,
            batch_size: self.batch_size,
            epochs,
            patience: self.patience,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(seed_offset),
            max_train: None,
            max_valid: (self.max_valid > 0).then_some(self.max_valid),
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.decode_max_len,
            length_penalty: self.length_penalty,
            ..DecodeConfig::default()
        }
    }

    /// Derived seed for a named artifact (corpus, stage, ...).
    pub fn derived_seed(&self, salt: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.task_pairs < 20 || self.style_sentences < 20 || self.pretrain_sentences < 20 {
            return bad("corpus sizes must be at least 20 so every split is non-empty");
        }
        if self.batch_size == 0 || self.beam_size == 0 || self.decode_max_len == 0 {
            return bad("batch_size, beam_size and decode_max_len must be positive");
        }
        if self.lm_k <= 0.0 {
            return bad("lm_k must be positive");
        }
        if !Selector::TASK.contains(&self.trainable) {
            return bad("trainable must be enc, enc+catt or enc+catt+dec");
        }
        for r in [self.noise, self.pretrain_noise] {
            if !(0.0..1.0).contains(&r.mask) || !(0.0..1.0).contains(&r.delete) || r.mask + r.delete >= 1.0 {
                return bad("noise rates must lie in [0, 1) and sum below 1");
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let m = &mut self.model;
        match key {
            "preset" => self.preset = Preset::parse(value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "d_ffn" => m.d_ffn = num(key, value)?,
            "n_enc_layers" => m.n_enc_layers = num(key, value)?,
            "n_dec_layers" => m.n_dec_layers = num(key, value)?,
            "adapter_bottleneck" => m.adapter_bottleneck = num(key, value)?,
            "max_len" => m.max_len = num(key, value)?,
            "init_seed" => m.seed = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "task_pairs" => self.task_pairs = num(key, value)?,
            "style_sentences" => self.style_sentences = num(key, value)?,
            "noise_mask" => self.noise.mask = num(key, value)?,
            "noise_delete" => self.noise.delete = num(key, value)?,
            "pretrain_sentences" => self.pretrain_sentences = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "pretrain_mask" => self.pretrain_noise.mask = num(key, value)?,
            "pretrain_delete" => self.pretrain_noise.delete = num(key, value)?,
            "lr" => self.optim.lr = num(key, value)?,
            "beta1" => self.optim.beta1 = num(key, value)?,
            "beta2" => self.optim.beta2 = num(key, value)?,
            "adam_eps" => self.optim.eps = num(key, value)?,
            "weight_decay" => self.optim.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "adapter_epochs" => self.adapter_epochs = num(key, value)?,
            "task_epochs" => self.task_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_valid" => self.max_valid = num(key, value)?,
            "trainable" => self.trainable = value.parse()?,
            "beam_size" => self.beam_size = num(key, value)?,
            "decode_max_len" => self.decode_max_len = num(key, value)?,
            "length_penalty" => self.length_penalty = num(key, value)?,
            "eval_examples" => self.eval_examples = num(key, value)?,
            "lm_k" => self.lm_k = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config text: the preset line first, then every other key in
    /// file order.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let preset = entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == "preset")
            .map(|(_, v, _)| Preset::parse(v))
            .transpose()?
            .unwrap_or(Preset::Toy);
        let mut cfg = Self::preset(preset);
        for (k, v, line) in &entries {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every knob as `key=value`, sorted by key; [`RunConfig::parse`] reads it
    /// back to an equal value.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let pairs: Vec<(&str, String)> = vec![
            ("preset", self.preset.as_str().into()),
            ("vocab_size", m.vocab_size.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ffn", m.d_ffn.to_string()),
            ("n_enc_layers", m.n_enc_layers.to_string()),
            ("n_dec_layers", m.n_dec_layers.to_string()),
            ("adapter_bottleneck", m.adapter_bottleneck.to_string()),
            ("max_len", m.max_len.to_string()),
            ("init_seed", m.seed.to_string()),
            ("dropout", m.dropout.to_string()),
            ("ln_eps", m.ln_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("task_pairs", self.task_pairs.to_string()),
            ("style_sentences", self.style_sentences.to_string()),
            ("noise_mask", self.noise.mask.to_string()),
            ("noise_delete", self.noise.delete.to_string()),
            ("pretrain_sentences", self.pretrain_sentences.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_mask", self.pretrain_noise.mask.to_string()),
            ("pretrain_delete", self.pretrain_noise.delete.to_string()),
            ("lr", self.optim.lr.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("adam_eps", self.optim.eps.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("adapter_epochs", self.adapter_epochs.to_string()),
            ("task_epochs", self.task_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("max_valid", self.max_valid.to_string()),
            ("trainable", self.trainable.to_string()),
            ("beam_size", self.beam_size.to_string()),
            ("decode_max_len", self.decode_max_len.to_string()),
            ("length_penalty", self.length_penalty.to_string()),
            ("eval_examples", self.eval_examples.to_string()),
            ("lm_k", self.lm_k.to_string()),
        ];
        let sorted: BTreeMap<_, _> = pairs.into_iter().collect();
        let mut out = String::new();
        for (k, v) in sorted {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

/// `(key, value, 1-based line)` triples of a `key=value` text. Blank lines
/// and `#` comments are skipped; anything else without `=` is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

impl ModelConfig {
    /// The model block of a checkpoint header, sorted by key.
    pub fn to_kv(&self) -> String {
        format!(
            "adapter_bottleneck={}\nd_ffn={}\nd_model={}\ndropout={}\nln_eps={}\nmax_len={}\nn_dec_layers={}\nn_enc_layers={}\nn_heads={}\nseed={}\nvocab_size={}\n",
            self.adapter_bottleneck,
            self.d_ffn,
            self.d_model,
            self.dropout,
            self.ln_eps,
            self.max_len,
            self.n_dec_layers,
            self.n_enc_layers,
            self.n_heads,
            self.seed,
            self.vocab_size
        )
    }

    /// Inverse of [`ModelConfig::to_kv`]; every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, String> = parse_kv(text)?.into_iter().map(|(k, v, _)| (k, v)).collect();
        let get = |k: &str| -> Result<&str> {
            entries
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("model config lacks `{k}`")))
        };
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Format(format!("model config `{k}`: cannot parse `{v}`")))
        }
        let c = Self {
            vocab_size: num("vocab_size", get("vocab_size")?)?,
            d_model: num("d_model", get("d_model")?)?,
            n_heads: num("n_heads", get("n_heads")?)?,
            d_ffn: num("d_ffn", get("d_ffn")?)?,
            n_enc_layers: num("n_enc_layers", get("n_enc_layers")?)?,
            n_dec_layers: num("n_dec_layers", get("n_dec_layers")?)?,
            adapter_bottleneck: num("adapter_bottleneck", get("adapter_bottleneck")?)?,
            max_len: num("max_len", get("max_len")?)?,
            seed: num("seed", get("seed")?)?,
            dropout: num("dropout", get("dropout")?)?,
            ln_eps: num("ln_eps", get("ln_eps")?)?,
        };
        if entries.len() != 11 {
            return Err(Error::Format("model config has unknown keys".into()));
        }
        c.validate()?;
        Ok(c)
    }
}
