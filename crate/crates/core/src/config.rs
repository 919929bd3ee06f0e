//! Run configuration, loaded from TOML with every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintWeights;
use crate::diffusion::SamplerConfig;
use crate::model::ModelConfig;
use crate::{Error, Result};

/// Components switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_vision_augment: bool,
    pub no_se_refiner: bool,
    pub no_constraints: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Personalisation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate of the denoiser's LoRA factors.
    pub lr_lora: f64,
    /// Learning rate of every other trainable parameter.
    pub lr_other: f64,
    pub optimizer: Optimizer,
    pub subject_drop_p: f64,
    pub uncond_p: f64,
    pub constraints: ConstraintWeights,
    /// Subject-branch weight used while training.
    pub train_blend: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 1,
            lr_lora: 1e-4,
            lr_other: 1e-5,
            optimizer: Optimizer::Sgd,
            subject_drop_p: 0.1,
            uncond_p: 0.1,
            constraints: ConstraintWeights::default(),
            train_blend: 1.0,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [("subject_drop_p", self.subject_drop_p), ("uncond_p", self.uncond_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_lora >= 0.0 && self.lr_other >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        let w = self.constraints;
        if !(w.lambda_tcac >= 0.0 && w.lambda_icac >= 0.0) {
            return bad("constraint weights must be non-negative".into());
        }
        Ok(())
    }

    /// Constraint weights after applying the ablation switch.
    pub fn effective_weights(&self) -> ConstraintWeights {
        if self.ablation.no_constraints {
            ConstraintWeights::ZERO
        } else {
            self.constraints
        }
    }
}

/// Text-to-image pretraining of the frozen base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub uncond_p: f64,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 1,
            lr: 2e-3,
            uncond_p: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub two_subject_p: f64,
    pub shard_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 512,
            two_subject_p: 0.5,
            shard_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Base seed of the held-out scenes.
    pub seed: u64,
    pub scenes: usize,
    /// Timestep the layout-hint image is noised to before sampling.
    pub t_start: usize,
    pub two_subject: bool,
    pub same_class: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1_000_003,
            scenes: 32,
            t_start: 99,
            two_subject: true,
            same_class: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let sched = self.model.schedule()?;
        self.sampler.validate(&sched).map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.t_start >= self.model.timesteps {
            return Err(Error::Config(format!("eval.t_start {} must be below {}", self.eval.t_start, self.model.timesteps)));
        }
        if !(0.0..=1.0).contains(&self.data.two_subject_p) {
            return Err(Error::Config("data.two_subject_p outside [0, 1]".into()));
        }
        Ok(())
    }
}
