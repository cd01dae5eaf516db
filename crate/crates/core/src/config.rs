//! Run configuration: one JSON document, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec};
use crate::policy::PruneConfig;
use crate::reconstruction::{DetectVariant, ReconMode, ThresholdPool};
use crate::trainer::{TrainConfig, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_seeds() -> usize {
    5
}

fn default_sensitivity_ratios() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_sensitivity_epochs() -> usize {
    5
}

fn default_finetune_lr() -> f64 {
    0.01
}

fn default_fraction() -> f64 {
    0.5
}

/// Knobs of the diagnostic subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed-grid commands use `seed, seed + 1, ...`.
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub sensitivity_layer: Option<String>,
    #[serde(default = "default_sensitivity_ratios")]
    pub sensitivity_ratios: Vec<f64>,
    #[serde(default = "default_sensitivity_epochs")]
    pub sensitivity_finetune_epochs: usize,
    /// Learning rate of the short fine-tunes in sensitivity mode.
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    /// Dense epochs used to train a model when no checkpoint is supplied.
    #[serde(default)]
    pub dense_epochs: usize,
    /// Fraction of each layer's filters removed by each gradient-accuracy arm.
    #[serde(default = "default_fraction")]
    pub prune_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_seeds: default_seeds(),
            sensitivity_layer: None,
            sensitivity_ratios: default_sensitivity_ratios(),
            sensitivity_finetune_epochs: default_sensitivity_epochs(),
            finetune_lr: default_finetune_lr(),
            dense_epochs: 0,
            prune_fraction: default_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the synthetic data generator; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub architecture: Architecture,
    pub data: DataSpec,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub experiments: ExperimentConfig,
}

impl RunConfig {
    /// A small synthetic configuration that completes in seconds.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            data_seed: None,
            architecture: Architecture::ResnetTiny { n_blocks: 1, base_width: 4 },
            data: DataSpec::Synthetic(SyntheticSpec::default()),
            prune: PruneConfig::default(),
            schedule: TrainSchedule {
                max_search_epochs: 4,
                max_finetune_epochs: 2,
                batch_size: 64,
                augment: None,
                ..TrainSchedule::default()
            },
            precision: Precision::F32,
            output_dir: None,
            experiments: ExperimentConfig::default(),
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("{origin}: line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_spec().validate()?;
        self.train_config().validate()?;
        let e = &self.experiments;
        if e.n_seeds == 0 {
            return Err(Error::Config("experiments.n_seeds must be positive".into()));
        }
        if e.sensitivity_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("sensitivity ratios must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&e.prune_fraction) {
            return Err(Error::Config(format!("prune_fraction must be in [0, 1], got {}", e.prune_fraction)));
        }
        if !(e.finetune_lr.is_finite() && e.finetune_lr >= 0.0) {
            return Err(Error::Config("finetune_lr must be >= 0".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture.clone(),
            input_shape: self.data.input_shape(),
            classes: self.data.classes(),
            seed: self.seed,
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { prune: self.prune.clone(), schedule: TrainSchedule { seed: self.seed, ..self.schedule.clone() } }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.output_dir = Some(p.clone());
        }
        if let Some(a) = o.adaptive {
            self.prune.adaptive = a;
        }
        if let Some(r) = o.uniform_ratio {
            self.prune.uniform_ratio = r;
        }
        if let Some(m) = o.recon {
            self.prune.recon_mode = m;
        }
        if let Some(d) = o.detect {
            self.prune.detect = d;
        }
        if let Some(t) = o.threshold_pool {
            self.prune.threshold_pool = t;
        }
        self.validate()
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub adaptive: Option<bool>,
    pub uniform_ratio: Option<f64>,
    pub recon: Option<ReconMode>,
    pub detect: Option<DetectVariant>,
    pub threshold_pool: Option<ThresholdPool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_round_trips_through_json() {
        let cfg = RunConfig::toy();
        let back = RunConfig::from_json(&cfg.to_json().unwrap(), "toy").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n  \"bogus\": 2\n}", "cfg.json").unwrap_err();
        match err {
            Error::Config(m) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::toy();
        cfg.apply(&Overrides {
            adaptive: Some(false),
            uniform_ratio: Some(0.5),
            recon: Some(ReconMode::None),
            seed: Some(7),
            ..Default::default()
        })
        .unwrap();
        assert!(!cfg.prune.adaptive);
        assert_eq!(cfg.prune.recon_mode, ReconMode::None);
        assert_eq!(cfg.train_config().schedule.seed, 7);
        assert!(cfg.apply(&Overrides { uniform_ratio: Some(1.5), ..Default::default() }).is_err());
    }
}
