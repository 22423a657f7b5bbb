//! Training configuration and its `key = value` text form.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::network::{Mode, NetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!(
                "unknown precision `{}` (expected f32 or f64)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs between learning-rate halvings.
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patch_size: usize,
    pub seed: u64,
    pub cell: CellKind,
    pub mode: Mode,
    pub features: usize,
    /// Present each sequence's frames in a random order.
    pub shuffle_exposure_order: bool,
    /// Sequence lengths to draw from per step; empty keeps the dataset's.
    pub variable_length_set: Vec<usize>,
    /// Steps between metric log rows.
    pub eval_interval: usize,
    /// Stop after this many steps; 0 means no cap.
    pub max_steps: usize,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 4,
            epochs: 200,
            halve_every: 25,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patch_size: 64,
            seed: 0,
            cell: CellKind::Sgm,
            mode: Mode::Bidirectional,
            features: 64,
            shuffle_exposure_order: false,
            variable_length_set: Vec::new(),
            eval_interval: 10,
            max_steps: 0,
            checkpoint_every: 0,
            precision: Precision::F32,
        }
    }
}

const KEYS: [&str; 18] = [
    "learning_rate",
    "batch_size",
    "epochs",
    "halve_every",
    "beta1",
    "beta2",
    "epsilon",
    "patch_size",
    "seed",
    "cell",
    "mode",
    "features",
    "shuffle_exposure_order",
    "variable_length_set",
    "eval_interval",
    "max_steps",
    "checkpoint_every",
    "precision",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{}` for `{}`", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean `{}` for `{}`", value, key))),
    }
}

/// Parse a comma-separated list of sequence lengths such as `3,5,7`.
pub fn parse_lengths(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num("variable_length_set", v.trim()))
        .collect()
}

impl TrainConfig {
    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "halve_every" => self.halve_every = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "cell" => self.cell = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "features" => self.features = parse_num(key, value)?,
            "shuffle_exposure_order" => self.shuffle_exposure_order = parse_bool(key, value)?,
            "variable_length_set" => self.variable_length_set = parse_lengths(value)?,
            "eval_interval" => self.eval_interval = parse_num(key, value)?,
            "max_steps" => self.max_steps = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "precision" => self.precision = value.parse()?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{}`", other))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "halve_every" => self.halve_every.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "seed" => self.seed.to_string(),
            "cell" => self.cell.to_string(),
            "mode" => self.mode.to_string(),
            "features" => self.features.to_string(),
            "shuffle_exposure_order" => self.shuffle_exposure_order.to_string(),
            "variable_length_set" => self
                .variable_length_set
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "eval_interval" => self.eval_interval.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "precision" => self.precision.to_string(),
            _ => unreachable!("key list is fixed"),
        }
    }

    /// Overlay the `key = value` lines of `text` on this config. Blank lines
    /// and `#` comments are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config { line: i + 1, detail };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{}`", line)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{}`", key)));
            }
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.merge_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k, self.get(k))).collect()
    }

    /// SHA-256 of [`TrainConfig::to_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.halve_every == 0 {
            return bad("halve_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("epsilon must be positive".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size must be positive and even, got {}", self.patch_size));
        }
        if self.features == 0 || !self.features.is_multiple_of(4) {
            return bad(format!(
                "features must be a positive multiple of 4, got {}",
                self.features
            ));
        }
        if self.variable_length_set.contains(&0) {
            return bad("sequence lengths must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            cell: self.cell,
            mode: self.mode,
            features: self.features,
            seed: self.seed,
        }
    }
}
