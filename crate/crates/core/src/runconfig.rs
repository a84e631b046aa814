//! Flat `key = value` configuration files.
//!
//! One namespace covers the network, the front end, training, the toy
//! corpus and scoring. `preset = tiny` (anywhere in the file) starts from
//! the small network instead of the full one; every other key overrides a
//! single field, and unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::dsp::FrameSpec;
use crate::model::AmcrnConfig;
use crate::scoring::{BackendKind, DEFAULT_THRESHOLD};
use crate::train::{ToySpeakerSpec, TrainConfig};
use crate::{Error, Result};

/// Splits `key = value` lines, skipping blanks and `#` comments. Returns
/// `(line number, key, value)` triples.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

/// Test-side truncation for evaluation, `None` for whole utterances.
pub fn parse_truncate(value: &str) -> Result<Option<f64>> {
    match value {
        "whole" => Ok(None),
        _ => {
            let s: f64 = parse("truncate", value)?;
            if s > 0.0 {
                Ok(Some(s))
            } else {
                Err(Error::config("truncate must be positive seconds or `whole`"))
            }
        }
    }
}

/// Every setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: AmcrnConfig,
    pub frontend: FrameSpec,
    pub train: TrainConfig,
    pub toy: ToySpeakerSpec,
    pub backend: BackendKind,
    pub threshold: f64,
    pub truncate: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: AmcrnConfig::default(),
            frontend: FrameSpec::default(),
            train: TrainConfig::default(),
            toy: ToySpeakerSpec::default(),
            backend: BackendKind::Csm,
            threshold: DEFAULT_THRESHOLD,
            truncate: None,
        }
    }
}

impl RunConfig {
    /// Applies the named preset (`full` or `tiny`) to the network.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let n_classes = self.model.n_classes;
        self.model = match name {
            "full" => AmcrnConfig::default(),
            "tiny" => AmcrnConfig::tiny(n_classes),
            _ => return Err(Error::config(format!("unknown preset `{name}` (expected full or tiny)"))),
        };
        self.model.n_classes = n_classes;
        Ok(())
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "n_mels" {
            self.frontend.n_mels = parse(key, value)?;
        }
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "preset" => self.apply_preset(value)?,
            "frame_len" => self.frontend.frame_len = parse(key, value)?,
            "frame_shift" => self.frontend.frame_shift = parse(key, value)?,
            "n_fft" => self.frontend.n_fft = parse(key, value)?,
            "f_min" => self.frontend.f_min = parse(key, value)?,
            "f_max" => self.frontend.f_max = parse(key, value)?,
            "lr_start" => self.train.lr_start = parse(key, value)?,
            "lr_end" => self.train.lr_end = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "crop_seconds" => self.train.crop_seconds = parse(key, value)?,
            "val_fraction" => self.train.val_fraction = parse(key, value)?,
            "augment_copies" => self.train.augment_copies = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "toy_speakers" => self.toy.n_speakers = parse(key, value)?,
            "toy_utterances" => self.toy.utterances_per_speaker = parse(key, value)?,
            "toy_seconds" => self.toy.utterance_seconds = parse(key, value)?,
            "toy_seed" => self.toy.seed = parse(key, value)?,
            "backend" => self.backend = value.parse()?,
            "threshold" => self.threshold = parse(key, value)?,
            "truncate" => self.truncate = parse_truncate(value)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `pairs` on top of `self`; a `preset` entry is applied first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let pairs = parse_pairs(text, path)?;
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (line, key, _) in &pairs {
            if !seen.insert(key.as_str()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("key `{key}` given twice"),
                });
            }
        }
        let kv: Vec<(String, String)> = pairs.iter().map(|(_, k, v)| (k.clone(), v.clone())).collect();
        cfg.apply(&kv).map_err(|e| {
            let line = pairs
                .iter()
                .find(|(_, k, _)| e.to_string().contains(&format!("`{k}`")))
                .map_or(0, |p| p.0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.frontend.validate(crate::dsp::SAMPLE_RATE)?;
        if self.frontend.n_mels != self.model.n_mels {
            return Err(Error::config("front-end and model disagree on n_mels"));
        }
        self.train.validate()?;
        if !self.threshold.is_finite() {
            return Err(Error::config("threshold must be finite"));
        }
        Ok(())
    }
}
