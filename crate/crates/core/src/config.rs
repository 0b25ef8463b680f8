//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known and may appear once; values are validated before any work starts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapt::AdaptConfig;
use crate::error::{invalid_arg, Error, Result};
use crate::segnet::{ModelMeta, TrainConfig};
use crate::synth::DomainSpec;
use crate::topohg::{HgConfig, HgVariant};

/// Named synthetic domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthDomain {
    Source,
    InvertedShift,
    LowContrastShift,
}

impl SynthDomain {
    pub fn name(self) -> &'static str {
        match self {
            SynthDomain::Source => "source",
            SynthDomain::InvertedShift => "inverted-shift",
            SynthDomain::LowContrastShift => "low-contrast-shift",
        }
    }

    pub fn spec(self, size: usize) -> DomainSpec {
        match self {
            SynthDomain::Source => DomainSpec::source(size),
            SynthDomain::InvertedShift => DomainSpec::inverted_shift(size),
            SynthDomain::LowContrastShift => DomainSpec::low_contrast_shift(size),
        }
    }
}

impl FromStr for SynthDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SynthDomain::Source, SynthDomain::InvertedShift, SynthDomain::LowContrastShift]
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| invalid_arg!("unknown synthetic domain {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelMeta,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub hg: HgConfig,
    pub seed: u64,
    pub synth_domain: SynthDomain,
    pub synth_count: usize,
    pub synth_size: usize,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelMeta::DEFAULT,
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            hg: HgConfig::default(),
            seed: 0,
            synth_domain: SynthDomain::Source,
            synth_count: 200,
            synth_size: 64,
            checkpoint: None,
            data: None,
            output: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "levels",
    "base_channels",
    "epochs",
    "train_lr",
    "batch_size",
    "val_fraction",
    "bn_momentum",
    "iterations",
    "lr_stage1",
    "lr_stage2",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "ema_rate",
    "teacher_rounds",
    "student_rounds",
    "scales",
    "continual",
    "binarize_threshold",
    "log_eps",
    "grid",
    "tau",
    "k",
    "window",
    "tau_bg",
    "low_freq_ratio",
    "variant",
    "seed",
    "synth_domain",
    "synth_count",
    "synth_size",
    "checkpoint",
    "data",
    "output",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid_arg!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid_arg!("{key}: expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "levels" => self.model.levels = parse(key, value)?,
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "train_lr" => self.train.lr = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "val_fraction" => self.train.val_fraction = parse(key, value)?,
            "bn_momentum" => self.train.bn_momentum = parse(key, value)?,
            "iterations" => self.adapt.iterations = parse(key, value)?,
            "lr_stage1" => self.adapt.lr_stage1 = parse(key, value)?,
            "lr_stage2" => self.adapt.lr_stage2 = parse(key, value)?,
            "adam_beta1" => self.adapt.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adapt.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adapt.adam.eps = parse(key, value)?,
            "ema_rate" => self.adapt.ema_rate = parse(key, value)?,
            "teacher_rounds" => self.adapt.teacher_rounds = parse(key, value)?,
            "student_rounds" => self.adapt.student_rounds = parse(key, value)?,
            "scales" => {
                self.adapt.scales = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "continual" => self.adapt.continual = parse_bool(key, value)?,
            "binarize_threshold" => self.adapt.binarize_threshold = parse(key, value)?,
            "log_eps" => self.adapt.log_eps = parse(key, value)?,
            "grid" => self.adapt.grid = parse(key, value)?,
            "tau" => self.hg.tau = parse(key, value)?,
            "k" => self.hg.k = parse(key, value)?,
            "window" => self.hg.s = parse(key, value)?,
            "tau_bg" => self.hg.tau_bg = parse(key, value)?,
            "low_freq_ratio" => self.hg.low_freq_ratio = parse(key, value)?,
            "variant" => self.hg.variant = value.parse::<HgVariant>()?,
            "seed" => self.seed = parse(key, value)?,
            "synth_domain" => self.synth_domain = value.parse()?,
            "synth_count" => self.synth_count = parse(key, value)?,
            "synth_size" => self.synth_size = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "data" => self.data = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            _ => return Err(invalid_arg!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg!("line {}: expected `key = value`, got {line:?}", lineno + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(invalid_arg!("line {}: duplicate key {key:?}", lineno + 1));
            }
            cfg.set(key, value)
                .map_err(|e| invalid_arg!("line {}: {}", lineno + 1, strip_prefix(&e)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| Error::format(path, strip_prefix(&e)))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| invalid_arg!("override {o:?} is not of the form key=value"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        self.hg.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(invalid_arg!("epochs and batch_size must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid_arg!("train_lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(invalid_arg!("val_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(invalid_arg!("bn_momentum must lie in [0, 1]"));
        }
        if self.synth_count == 0 {
            return Err(invalid_arg!("synth_count must be positive"));
        }
        self.synth_domain.spec(self.synth_size).validate()
    }

    /// Every setting as `key = value` lines, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let a = &self.adapt;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let scales: Vec<String> = a.scales.iter().map(|s| s.to_string()).collect();
        let values = [
            self.model.levels.to_string(),
            self.model.base_channels.to_string(),
            self.train.epochs.to_string(),
            self.train.lr.to_string(),
            self.train.batch_size.to_string(),
            self.train.val_fraction.to_string(),
            self.train.bn_momentum.to_string(),
            a.iterations.to_string(),
            a.lr_stage1.to_string(),
            a.lr_stage2.to_string(),
            a.adam.beta1.to_string(),
            a.adam.beta2.to_string(),
            a.adam.eps.to_string(),
            a.ema_rate.to_string(),
            a.teacher_rounds.to_string(),
            a.student_rounds.to_string(),
            scales.join(","),
            a.continual.to_string(),
            a.binarize_threshold.to_string(),
            a.log_eps.to_string(),
            a.grid.to_string(),
            self.hg.tau.to_string(),
            self.hg.k.to_string(),
            self.hg.s.to_string(),
            self.hg.tau_bg.to_string(),
            self.hg.low_freq_ratio.to_string(),
            self.hg.variant.to_string(),
            self.seed.to_string(),
            self.synth_domain.name().to_string(),
            self.synth_count.to_string(),
            self.synth_size.to_string(),
            path(&self.checkpoint),
            path(&self.data),
            path(&self.output),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}
