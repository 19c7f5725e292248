//! Flat JSON experiment configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown
//! keys are rejected. `--set key=value` on the command line overrides a
//! key after the file is read, with `value` parsed as JSON (bare words
//! fall back to strings).

use std::path::{Path, PathBuf};

use dua_core::bn::{MomentumSchedule, StatsTiming};
use dua_core::model::{LayerMask, Model};
use dua_core::shiftlab::{AugmentSet, Augmentation, CorruptionKind, CorruptionSpec};
use dua_core::AdaptConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{config_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Eval,
    AdaptCurve,
    ShuffleStability,
    OmegaSweep,
    LayerAblation,
    Cycle,
    Density,
    NormBaseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::AdaptCurve => "adapt-curve",
            Command::ShuffleStability => "shuffle-stability",
            Command::OmegaSweep => "omega-sweep",
            Command::LayerAblation => "layer-ablation",
            Command::Cycle => "cycle",
            Command::Density => "density",
            Command::NormBaseline => "norm-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Clean,
    Corrupt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub domain: Domain,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub dataset: DatasetKind,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub checkpoint: PathBuf,

    pub corruption: CorruptionKind,
    pub severity: u8,

    pub batch_size: usize,
    pub augmentations: Vec<Augmentation>,
    /// `null` adapts every batch-norm layer.
    pub layer_mask: Option<Vec<String>>,
    pub rho0: f64,
    pub omega: f64,
    pub zeta: f64,
    pub stats_timing: StatsTiming,

    pub n_adapt_samples: usize,
    pub n_runs: usize,
    pub seed: u64,
    /// Per-run stream seeds for shuffle-stability; default `seed + run_id`.
    pub run_seeds: Option<Vec<u64>>,
    pub output_dir: PathBuf,
    pub eval_slice: usize,
    pub eval_every: usize,
    pub eval_chunk: usize,

    pub epochs: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub train_batch: usize,

    pub fixed_momentum_arm: bool,
    pub norm_arm: bool,
    pub norm_batch_sizes: Vec<usize>,
    pub omegas: Vec<f64>,
    pub stability_checkpoints: Vec<usize>,
    pub cycle: Vec<Segment>,
    /// Restart the momentum schedule when the cycle switches domain.
    pub cycle_reset_schedule: bool,
    pub density_layer: String,
    pub density_bins: usize,
    pub density_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seg = |domain, samples| Segment { domain, samples };
        ExperimentConfig {
            command: Command::AdaptCurve,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            data_seed: 0,
            train_samples: 8000,
            test_samples: 12000,
            checkpoint: PathBuf::from("model.dua"),
            corruption: CorruptionKind::GaussianNoise,
            severity: 5,
            batch_size: 64,
            augmentations: vec![Augmentation::Hflip, Augmentation::Crop, Augmentation::Rot90s],
            layer_mask: None,
            rho0: 0.1,
            omega: 0.94,
            zeta: 0.005,
            stats_timing: StatsTiming::Post,
            n_adapt_samples: 100,
            n_runs: 30,
            seed: 0,
            run_seeds: None,
            output_dir: PathBuf::from("out"),
            eval_slice: 2000,
            eval_every: 1,
            eval_chunk: 250,
            epochs: 5,
            lr: 0.05,
            sgd_momentum: 0.9,
            train_batch: 64,
            fixed_momentum_arm: true,
            norm_arm: true,
            norm_batch_sizes: vec![16, 64, 512],
            omegas: vec![0.5, 0.8, 0.94, 0.99, 1.0],
            stability_checkpoints: vec![5, 25, 100],
            cycle: vec![
                seg(Domain::Clean, 100),
                seg(Domain::Corrupt, 100),
                seg(Domain::Clean, 100),
                seg(Domain::Corrupt, 100),
                seg(Domain::Clean, 100),
            ],
            cycle_reset_schedule: true,
            density_layer: "bn3".into(),
            density_bins: 64,
            density_samples: 1000,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{raw}' is not key=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config JSON: {e}")))
    }

    /// Reads a config file. A missing or malformed file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides through the JSON representation, so
    /// they are type-checked exactly like file values.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut obj = serde_json::to_value(&self).expect("config serializes");
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            let map = obj.as_object_mut().expect("config is an object");
            if !map.contains_key(&key) {
                return config_err(format!("unknown config key '{key}'"));
            }
            map.insert(key, value);
        }
        serde_json::from_value(obj).map_err(|e| HarnessError::Config(format!("bad override: {e}")))
    }

    pub fn corruption_spec(&self) -> Result<CorruptionSpec> {
        Ok(CorruptionSpec::new(self.corruption, self.severity)?)
    }

    pub fn schedule(&self) -> Result<MomentumSchedule> {
        Ok(MomentumSchedule::new(self.rho0, self.omega, self.zeta)?)
    }

    pub fn augment_set(&self) -> AugmentSet {
        self.augmentations.iter().copied().collect()
    }

    pub fn layer_mask_for(&self, model: &Model) -> LayerMask {
        match &self.layer_mask {
            None => LayerMask::all(model),
            Some(names) => LayerMask::from_names(names.iter().cloned()),
        }
    }

    pub fn adapt_config(&self, model: &Model, seed: u64) -> Result<AdaptConfig> {
        let cfg = AdaptConfig {
            batch_size: self.batch_size,
            augmentations: self.augment_set(),
            layer_mask: self.layer_mask_for(model),
            schedule: self.schedule()?,
            seed,
            timing: self.stats_timing,
        };
        cfg.validate(model)?;
        Ok(cfg)
    }

    /// Checks everything that does not need the dataset or model.
    pub fn validate(&self) -> Result<()> {
        self.corruption_spec()?;
        self.schedule()?;
        if self.batch_size == 0 {
            return config_err("batch_size must be >= 1");
        }
        if self.eval_slice == 0 || self.eval_every == 0 || self.eval_chunk == 0 {
            return config_err("eval_slice, eval_every and eval_chunk must be >= 1");
        }
        if self.eval_slice >= self.test_samples && self.dataset == DatasetKind::Synthetic {
            return config_err("eval_slice must leave test samples for the adaptation stream");
        }
        if self.dataset == DatasetKind::Mnist && self.data_dir.is_none() {
            return config_err("dataset 'mnist' needs data_dir");
        }
        if self.train_batch == 0 || self.epochs == 0 {
            return config_err("train_batch and epochs must be >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return config_err("need lr > 0 and 0 <= sgd_momentum < 1");
        }
        if let Some(w) = self.omegas.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
            return config_err(format!("omega {w} not in (0, 1]"));
        }
        if self.density_bins == 0 || self.density_samples == 0 {
            return config_err("density_bins and density_samples must be >= 1");
        }
        if let Some(seeds) = &self.run_seeds {
            if seeds.len() != self.n_runs {
                return config_err(format!("run_seeds has {} entries for n_runs {}", seeds.len(), self.n_runs));
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        match &self.run_seeds {
            Some(s) => s[run],
            None => self.seed.wrapping_add(run as u64),
        }
    }

    /// SHA-256 of the canonical JSON form without `output_dir`, hex.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("output_dir");
        let text = value.to_string();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
