//! Run configuration: defaults, the flat key-value file format, and the
//! canonical serialization written into output directories.
//!
//! Grammar: one `section.key = value` pair per line; `#` starts a comment;
//! blank lines are ignored. Values may not contain `#` or newlines. Lists
//! (only `sweep.taus`) are comma-separated. Unknown and duplicate keys are
//! errors so typos cannot silently fall back to defaults.
//!
//! Resolution order is defaults, then the config file, then command-line
//! flags; subcommands receive a fully resolved [`RunConfig`] and write its
//! serialization next to their outputs so every artifact records the exact
//! settings that produced it.

use std::path::{Path, PathBuf};

use crate::backbone::{BackboneTrainParams, ModelConfig};
use crate::decoder::DecoderTrainParams;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_TAUS;
use crate::exit::ExitConfig;
use crate::prior::PriorConfig;

/// Every tunable for the whole pipeline, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub backbone_train: BackboneTrainParams,
    pub decoder_train: DecoderTrainParams,
    pub exit: ExitConfig,
    /// Threshold grid for sweeps; single-task inference uses `exit.tau`.
    pub sweep_taus: Vec<f64>,
    pub folds: usize,
    pub max_context: usize,
    /// Seeds fold shuffling, context subsampling, and single-task splits.
    pub sweep_seed: u64,
    pub checkpoint: PathBuf,
    /// Dataset manifest for sweeps; empty means not configured.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub label_column: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prior: PriorConfig::default(),
            model: ModelConfig::default(),
            backbone_train: BackboneTrainParams::default(),
            decoder_train: DecoderTrainParams::default(),
            exit: ExitConfig::default(),
            sweep_taus: DEFAULT_TAUS.to_vec(),
            folds: 5,
            max_context: 256,
            sweep_seed: 0,
            checkpoint: PathBuf::from("model.ckpt"),
            manifest: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            label_column: String::from("label"),
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {want}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad_value(key, value, "a float"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| bad_value(key, value, "a comma-separated float list"))
        })
        .collect()
}

impl RunConfig {
    /// Applies one `section.key` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "prior.n_samples_per_task" => {
                self.prior.n_samples_per_task = parse_usize(key, value)?
            }
            "prior.max_features" => self.prior.max_features = parse_usize(key, value)?,
            "prior.max_classes" => self.prior.max_classes = parse_usize(key, value)?,
            "prior.train_fraction" => self.prior.train_fraction = parse_f64(key, value)?,
            "prior.mlp_depth_min" => self.prior.mlp_depth_range.0 = parse_usize(key, value)?,
            "prior.mlp_depth_max" => self.prior.mlp_depth_range.1 = parse_usize(key, value)?,
            "prior.mlp_width_min" => self.prior.mlp_width_range.0 = parse_usize(key, value)?,
            "prior.mlp_width_max" => self.prior.mlp_width_range.1 = parse_usize(key, value)?,
            "prior.noise_std" => self.prior.noise_std = parse_f64(key, value)?,
            "prior.seed" => self.prior.seed = parse_u64(key, value)?,
            "model.d_model" => self.model.d_model = parse_usize(key, value)?,
            "model.n_layers" => self.model.n_layers = parse_usize(key, value)?,
            "model.n_heads" => self.model.n_heads = parse_usize(key, value)?,
            "model.d_ff" => self.model.d_ff = parse_usize(key, value)?,
            "model.max_features" => self.model.max_features = parse_usize(key, value)?,
            "model.max_classes" => self.model.max_classes = parse_usize(key, value)?,
            "model.seed" => self.model.seed = parse_u64(key, value)?,
            "backbone.steps" => self.backbone_train.steps = parse_usize(key, value)?,
            "backbone.batch_size" => self.backbone_train.batch_size = parse_usize(key, value)?,
            "backbone.lr" => self.backbone_train.lr = parse_f64(key, value)?,
            "decoder.epochs" => self.decoder_train.epochs = parse_usize(key, value)?,
            "decoder.steps_per_epoch" => {
                self.decoder_train.steps_per_epoch = parse_usize(key, value)?
            }
            "decoder.batch_size" => self.decoder_train.batch_size = parse_usize(key, value)?,
            "decoder.lr" => self.decoder_train.lr = parse_f64(key, value)?,
            "exit.tau" => self.exit.tau = parse_f64(key, value)?,
            "exit.normalize_entropy" => self.exit.normalize_entropy = parse_bool(key, value)?,
            "exit.min_layer" => self.exit.min_layer = parse_usize(key, value)?,
            "sweep.taus" => self.sweep_taus = parse_f64_list(key, value)?,
            "sweep.folds" => self.folds = parse_usize(key, value)?,
            "sweep.max_context" => self.max_context = parse_usize(key, value)?,
            "sweep.seed" => self.sweep_seed = parse_u64(key, value)?,
            "paths.checkpoint" => self.checkpoint = PathBuf::from(value),
            "paths.manifest" => self.manifest = PathBuf::from(value),
            "paths.out" => self.out_dir = PathBuf::from(value),
            "data.label_column" => self.label_column = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of `self`, enforcing the grammar above.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Defaults overridden by the file at `path`, when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!(
                "cannot read config file {}: {e}",
                path.display()
            )))?;
            config.apply_text(&text)?;
        }
        Ok(config)
    }

    /// Points every seeded component at the same value.
    pub fn set_seed(&mut self, seed: u64) {
        self.prior.seed = seed;
        self.model.seed = seed;
        self.sweep_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.model.validate()?;
        self.backbone_train.validate()?;
        self.decoder_train.validate()?;
        self.exit.validate(self.model.n_layers)?;
        if self.sweep_taus.is_empty() {
            return Err(Error::Config("sweep.taus must not be empty".into()));
        }
        for &t in &self.sweep_taus {
            if t < 0.0 || !t.is_finite() {
                return Err(Error::Config(format!(
                    "sweep.taus entries must be finite and non-negative, got {t}"
                )));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "sweep.folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.max_context == 0 {
            return Err(Error::Config("sweep.max_context must be at least 1".into()));
        }
        if self.label_column.is_empty() {
            return Err(Error::Config("data.label_column must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key in a fixed order, parseable by
    /// [`RunConfig::apply_text`] back to an equal value.
    pub fn to_text(&self) -> String {
        let taus: Vec<String> = self.sweep_taus.iter().map(|t| t.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("prior.n_samples_per_task", self.prior.n_samples_per_task.to_string()),
            ("prior.max_features", self.prior.max_features.to_string()),
            ("prior.max_classes", self.prior.max_classes.to_string()),
            ("prior.train_fraction", self.prior.train_fraction.to_string()),
            ("prior.mlp_depth_min", self.prior.mlp_depth_range.0.to_string()),
            ("prior.mlp_depth_max", self.prior.mlp_depth_range.1.to_string()),
            ("prior.mlp_width_min", self.prior.mlp_width_range.0.to_string()),
            ("prior.mlp_width_max", self.prior.mlp_width_range.1.to_string()),
            ("prior.noise_std", self.prior.noise_std.to_string()),
            ("prior.seed", self.prior.seed.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.n_layers", self.model.n_layers.to_string()),
            ("model.n_heads", self.model.n_heads.to_string()),
            ("model.d_ff", self.model.d_ff.to_string()),
            ("model.max_features", self.model.max_features.to_string()),
            ("model.max_classes", self.model.max_classes.to_string()),
            ("model.seed", self.model.seed.to_string()),
            ("backbone.steps", self.backbone_train.steps.to_string()),
            ("backbone.batch_size", self.backbone_train.batch_size.to_string()),
            ("backbone.lr", self.backbone_train.lr.to_string()),
            ("decoder.epochs", self.decoder_train.epochs.to_string()),
            ("decoder.steps_per_epoch", self.decoder_train.steps_per_epoch.to_string()),
            ("decoder.batch_size", self.decoder_train.batch_size.to_string()),
            ("decoder.lr", self.decoder_train.lr.to_string()),
            ("exit.tau", self.exit.tau.to_string()),
            ("exit.normalize_entropy", self.exit.normalize_entropy.to_string()),
            ("exit.min_layer", self.exit.min_layer.to_string()),
            ("sweep.taus", taus.join(",")),
            ("sweep.folds", self.folds.to_string()),
            ("sweep.max_context", self.max_context.to_string()),
            ("sweep.seed", self.sweep_seed.to_string()),
            ("paths.checkpoint", self.checkpoint.display().to_string()),
            ("paths.manifest", self.manifest.display().to_string()),
            ("paths.out", self.out_dir.display().to_string()),
            ("data.label_column", self.label_column.clone()),
        ];
        let mut out = String::from("# resolved run configuration\n");
        for (key, value) in pairs {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}
