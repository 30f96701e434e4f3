//! Run configuration: `[section]` headers and `key = value` lines.
//!
//! Every key has a default, so an empty file is a valid config. Values are
//! kept as strings and parsed on access; the canonical rendering lists all
//! keys in a fixed order and is what gets hashed and written to a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use kgseq_core::complex::ComplexConfig;
use kgseq_core::kg::Scope;
use kgseq_core::lp::{Decoding, TrainConfig};
use kgseq_core::model::ModelConfig;
use kgseq_core::optim::LrSchedule;
use kgseq_core::textmap::MentionMode;
use kgseq_core::Precision;

use crate::error::{AppError, AppResult};
use crate::formats::{parse_mode, sha256_hex};

pub const ENV_PREFIX: &str = "KGSEQ_";

/// `(section, key, default)` in canonical order.
const DEFAULTS: &[(&str, &str, &str)] = &[
    ("data", "dir", ""),
    ("split", "fraction", "0.5"),
    ("split", "seed", "0"),
    ("registry", "mode", "one-to-one"),
    ("tokenizer", "target_size", "200"),
    ("tokenizer", "min_frequency", "2"),
    ("model", "precision", "f32"),
    ("model", "d_model", "64"),
    ("model", "n_heads", "4"),
    ("model", "d_ff", "128"),
    ("model", "enc_layers", "2"),
    ("model", "dec_layers", "2"),
    ("model", "max_len", "64"),
    ("model", "dropout", "0.1"),
    ("model", "num_buckets", "32"),
    ("model", "max_distance", "128"),
    ("model", "seed", "0"),
    ("train", "batch_size", "320"),
    ("train", "steps", "1000"),
    ("train", "schedule", "warmup"),
    ("train", "lr", "0.001"),
    ("train", "warmup", "100"),
    ("train", "log_every", "100"),
    ("train", "checkpoint_every", "0"),
    ("train", "eval_every", "0"),
    ("train", "patience", "3"),
    ("train", "seed", "0"),
    ("inference", "decoding", "sample"),
    ("inference", "sample_size", "500"),
    ("inference", "beam", "4"),
    ("inference", "alpha", "tune"),
    ("inference", "hops", "1"),
    ("inference", "filter", "train+valid+test"),
    ("inference", "workers", "1"),
    ("inference", "seed", "0"),
    ("qa", "batch_size", "160"),
    ("qa", "steps", "1000"),
    ("qa", "lr", "0.001"),
    ("qa", "seed", "0"),
    ("complex", "rank", "32"),
    ("complex", "steps", "1000"),
    ("complex", "lr", "0.01"),
    ("complex", "batch_size", "128"),
    ("complex", "weight_decay", "0"),
    ("complex", "seed", "0"),
    ("pathpred", "hops", "1"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
                .collect(),
        }
    }
}

fn known(section: &str, key: &str) -> bool {
    DEFAULTS.iter().any(|&(s, k, _)| s == section && k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> AppResult<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            if section.is_empty() {
                return Err(AppError::Config(format!("config line {}: key outside a section", i + 1)));
            }
            cfg.set(&section, k.trim(), v.trim())
                .map_err(|e| AppError::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> AppResult<()> {
        if !known(section, key) {
            return Err(AppError::Config(format!("unknown setting {section}.{key}")));
        }
        self.values.insert((section.into(), key.into()), value.into());
        Ok(())
    }

    /// `section.key=value`, as given to `--set`.
    pub fn set_assignment(&mut self, s: &str) -> AppResult<()> {
        let (path, v) = s
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("expected section.key=value, got {s:?}")))?;
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| AppError::Config(format!("expected section.key, got {path:?}")))?;
        self.set(sec.trim(), key.trim(), v.trim())
    }

    /// Applies `KGSEQ_<SECTION>_<KEY>` variables from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> AppResult<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let hit = DEFAULTS
                .iter()
                .find(|&&(s, k, _)| rest.strip_prefix(s).and_then(|r| r.strip_prefix('_')) == Some(k));
            match hit {
                Some(&(s, k, _)) => self.set(s, k, &value)?,
                None if rest == "log" => {}
                None => return Err(AppError::Config(format!("unknown environment override {name}"))),
            }
        }
        Ok(())
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no default for {section}.{key}"))
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> AppResult<T> {
        let v = self.raw(section, key);
        v.parse()
            .map_err(|_| AppError::Config(format!("{section}.{key}: cannot parse {v:?}")))
    }

    /// All keys of the given sections in canonical order.
    pub fn render_sections(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        let mut current = "";
        for &(s, k, _) in DEFAULTS {
            if !sections.is_empty() && !sections.contains(&s) {
                continue;
            }
            if s != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{s}]").unwrap();
                current = s;
            }
            writeln!(out, "{k} = {}", self.raw(s, k)).unwrap();
        }
        out
    }

    pub fn render(&self) -> String {
        self.render_sections(&[])
    }

    /// Hash of the sections a stage depends on.
    pub fn hash_sections(&self, sections: &[&str]) -> String {
        sha256_hex(self.render_sections(sections).as_bytes())
    }

    // ---- typed views ------------------------------------------------------

    pub fn data_dir(&self) -> Option<PathBuf> {
        let d = self.raw("data", "dir");
        (!d.is_empty()).then(|| PathBuf::from(d))
    }

    pub fn mention_mode(&self) -> AppResult<MentionMode> {
        let m = self.raw("registry", "mode");
        parse_mode(m).ok_or_else(|| AppError::Config(format!("registry.mode: unknown mode {m:?}")))
    }

    pub fn precision(&self) -> AppResult<Precision> {
        match self.raw("model", "precision") {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            p => Err(AppError::Config(format!("model.precision: expected f32 or f64, got {p:?}"))),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> AppResult<ModelConfig> {
        let c = ModelConfig {
            d_model: self.get("model", "d_model")?,
            n_heads: self.get("model", "n_heads")?,
            d_ff: self.get("model", "d_ff")?,
            n_enc_layers: self.get("model", "enc_layers")?,
            n_dec_layers: self.get("model", "dec_layers")?,
            vocab_size,
            max_len: self.get("model", "max_len")?,
            dropout: self.get("model", "dropout")?,
            num_buckets: self.get("model", "num_buckets")?,
            max_distance: self.get("model", "max_distance")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> AppResult<TrainConfig> {
        let lr: f64 = self.get("train", "lr")?;
        let schedule = match self.raw("train", "schedule") {
            "warmup" => LrSchedule::Warmup {
                peak: lr,
                warmup: self.get("train", "warmup")?,
            },
            "constant" => LrSchedule::Constant(lr),
            s => return Err(AppError::Config(format!("train.schedule: expected warmup or constant, got {s:?}"))),
        };
        Ok(TrainConfig {
            batch_size: positive(self.get("train", "batch_size")?, "train.batch_size")?,
            steps: self.get("train", "steps")?,
            schedule,
            seed: self.get("train", "seed")?,
            log_every: self.get("train", "log_every")?,
            checkpoint_every: self.get("train", "checkpoint_every")?,
            eval_every: self.get("train", "eval_every")?,
            patience: self.get("train", "patience")?,
            ..TrainConfig::default()
        })
    }

    pub fn qa_train_config(&self) -> AppResult<TrainConfig> {
        let base = self.train_config()?;
        Ok(TrainConfig {
            batch_size: positive(self.get("qa", "batch_size")?, "qa.batch_size")?,
            steps: self.get("qa", "steps")?,
            schedule: LrSchedule::Constant(self.get("qa", "lr")?),
            seed: self.get("qa", "seed")?,
            checkpoint_every: 0,
            eval_every: 0,
            ..base
        })
    }

    pub fn complex_config(&self) -> AppResult<ComplexConfig> {
        Ok(ComplexConfig {
            rank: positive(self.get("complex", "rank")?, "complex.rank")?,
            steps: self.get("complex", "steps")?,
            lr: self.get("complex", "lr")?,
            batch_size: positive(self.get("complex", "batch_size")?, "complex.batch_size")?,
            seed: self.get("complex", "seed")?,
            weight_decay: self.get("complex", "weight_decay")?,
        })
    }

    pub fn filter_scope(&self) -> AppResult<Scope> {
        Ok(Scope::parse(self.raw("inference", "filter"))?)
    }

    /// `None` means tune on the validation questions.
    pub fn alpha(&self) -> AppResult<Option<f64>> {
        match self.raw("inference", "alpha") {
            "tune" => Ok(None),
            _ => self.get("inference", "alpha").map(Some),
        }
    }

    pub fn decoding(&self) -> AppResult<Decoding> {
        match self.raw("inference", "decoding") {
            "sample" => Ok(Decoding::Sample(positive(self.get("inference", "sample_size")?, "inference.sample_size")?)),
            "beam" => Ok(Decoding::Beam(positive(self.get("inference", "beam")?, "inference.beam")?)),
            "exhaustive" => Ok(Decoding::Exhaustive),
            d => Err(AppError::Config(format!("inference.decoding: expected sample, beam or exhaustive, got {d:?}"))),
        }
    }

    pub fn workers(&self) -> AppResult<usize> {
        positive(self.get("inference", "workers")?, "inference.workers")
    }
}

fn positive(v: usize, name: &str) -> AppResult<usize> {
    if v == 0 {
        Err(AppError::Config(format!("{name} must be at least 1")))
    } else {
        Ok(v)
    }
}
