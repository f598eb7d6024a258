//! Run configuration: `key = value` lines with `#` comments in one flat
//! namespace, overridden by command-line settings.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use epsilon_core::datagen::SynthConfig;
use epsilon_core::model::{Branches, ModelConfig};
use epsilon_core::objective::{LossConfig, RegularizerMode};
use epsilon_core::trainer::{EvalConfig, OptimConfig};

use crate::error::{CliError, Result};

/// Every setting a command can read, with the owning module's view of it
/// available through the accessor methods.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Seeds both data generation and training.
    pub seed: u64,

    pub num_seen: usize,
    pub num_unseen: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub num_tokens: usize,
    pub labels_min: usize,
    pub labels_max: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,

    pub groups: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Defaults to `token_dim` when unset.
    pub mlp_hidden: Option<usize>,
    pub branches: Branches,
    pub project_kv: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub halve_at_epoch: usize,
    pub decay_all: bool,

    pub lambda: f64,
    pub regularizer: RegularizerMode,

    pub ks: Vec<usize>,

    pub sweep_m: Vec<usize>,
    pub sweep_lambda: Vec<f64>,
    /// Seeds averaged per sweep row; defaults to `seed` alone.
    pub sweep_seeds: Option<Vec<u64>>,
}

/// Keys accepted in config files and `--set`.
pub const KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "seed",
    "num_seen",
    "num_unseen",
    "embed_dim",
    "token_dim",
    "num_tokens",
    "labels_min",
    "labels_max",
    "noise_sigma",
    "train_size",
    "test_size",
    "groups",
    "encoder_layers",
    "encoder_heads",
    "mlp_hidden",
    "branches",
    "project_kv",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "epochs",
    "batch_size",
    "halve_at_epoch",
    "decay_all",
    "lambda",
    "regularizer",
    "ks",
    "sweep_m",
    "sweep_lambda",
    "sweep_seeds",
];

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig::new(synth.token_dim, synth.num_tokens, synth.embed_dim);
        let optim = OptimConfig::synthetic();
        let loss = LossConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            seed: 0,
            num_seen: synth.num_seen,
            num_unseen: synth.num_unseen,
            embed_dim: synth.embed_dim,
            token_dim: synth.token_dim,
            num_tokens: synth.num_tokens,
            labels_min: synth.labels_min,
            labels_max: synth.labels_max,
            noise_sigma: synth.noise_sigma,
            train_size: synth.train_size,
            test_size: synth.test_size,
            groups: model.groups,
            encoder_layers: model.encoder_layers,
            encoder_heads: model.encoder_heads,
            mlp_hidden: None,
            branches: model.branches,
            project_kv: model.project_kv,
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            epochs: optim.epochs,
            batch_size: optim.batch_size,
            halve_at_epoch: optim.halve_at_epoch,
            decay_all: optim.decay_all,
            lambda: loss.lambda,
            regularizer: loss.regularizer,
            ks: EvalConfig::default().ks,
            sweep_m: vec![2, 4, 8, 16],
            sweep_lambda: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            sweep_seeds: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::validation(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(CliError::validation(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_regularizer(value: &str) -> Result<RegularizerMode> {
    match value {
        "per_row" => Ok(RegularizerMode::PerRow),
        "per_dimension" => Ok(RegularizerMode::PerDimension),
        other => Err(CliError::validation(format!(
            "bad value {other:?} for regularizer: expected per_row or per_dimension"
        ))),
    }
}

impl RunConfig {
    /// Defaults overridden by the file, if any, then by `overrides`
    /// (`key=value` strings), then validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the lines of a config file; repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(CliError::validation(format!("line {}: {k} set twice", i + 1)));
            }
            seen.push(k);
            self.set(k, v)
                .map_err(|e| CliError::validation(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "num_seen" => self.num_seen = parse(key, value)?,
            "num_unseen" => self.num_unseen = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "token_dim" => self.token_dim = parse(key, value)?,
            "num_tokens" => self.num_tokens = parse(key, value)?,
            "labels_min" => self.labels_min = parse(key, value)?,
            "labels_max" => self.labels_max = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "encoder_heads" => self.encoder_heads = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = Some(parse(key, value)?),
            "branches" => self.branches = value.parse()?,
            "project_kv" => self.project_kv = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "halve_at_epoch" => self.halve_at_epoch = parse(key, value)?,
            "decay_all" => self.decay_all = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "regularizer" => self.regularizer = parse_regularizer(value)?,
            "ks" => self.ks = parse_list(key, value)?,
            "sweep_m" => self.sweep_m = parse_list(key, value)?,
            "sweep_lambda" => self.sweep_lambda = parse_list(key, value)?,
            "sweep_seeds" => self.sweep_seeds = Some(parse_list(key, value)?),
            other => return Err(CliError::validation(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_seen: self.num_seen,
            num_unseen: self.num_unseen,
            embed_dim: self.embed_dim,
            token_dim: self.token_dim,
            num_tokens: self.num_tokens,
            labels_min: self.labels_min,
            labels_max: self.labels_max,
            noise_sigma: self.noise_sigma,
            train_size: self.train_size,
            test_size: self.test_size,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            groups: self.groups,
            token_dim: self.token_dim,
            num_tokens: self.num_tokens,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            encoder_heads: self.encoder_heads,
            mlp_hidden: self.mlp_hidden.unwrap_or(self.token_dim),
            branches: self.branches,
            project_kv: self.project_kv,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            halve_at_epoch: self.halve_at_epoch,
            seed: self.seed,
            decay_all: self.decay_all,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            regularizer: self.regularizer,
        }
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.sweep_seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig { ks: self.ks.clone() }
    }

    /// Checks every section against its module's invariants.
    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.model().validate()?;
        self.optim().validate()?;
        self.loss().validate()?;
        for &k in &self.ks {
            if k == 0 || k > self.num_unseen {
                return Err(CliError::validation(format!(
                    "ks entry {k} must lie in 1..={} (the unseen label count)",
                    self.num_unseen
                )));
            }
        }
        if let Some(&m) = self.sweep_m.iter().find(|&&m| m == 0) {
            return Err(CliError::validation(format!("sweep_m entry {m} must be positive")));
        }
        if let Some(l) = self.sweep_lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(CliError::validation(format!("sweep_lambda entry {l} must lie in [0, 1]")));
        }
        Ok(())
    }
}
