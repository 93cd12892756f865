//! Experiment configuration: a JSON document with fixed sections; unknown
//! keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, HarnessError};
use crate::data::SyntheticSpec;
use crate::optim::{OptimizerKind, Schedule, TrainPolicy};
use crate::pruning::{PruneSchedule, PruneScope};
use crate::vit::{Activation, ViTConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Cifar10 {
        train_files: Vec<PathBuf>,
        #[serde(default)]
        test_file: Option<PathBuf>,
    },
    Cifar100 {
        train_files: Vec<PathBuf>,
        #[serde(default)]
        test_file: Option<PathBuf>,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fraction ε of training labels flipped symmetrically.
    pub epsilon: f64,
    /// Optional `index,label` file replacing training labels (ε ignored).
    #[serde(default)]
    pub external_labels: Option<PathBuf>,
}

fn default_smoothing() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    /// Tolerance δ in accuracy units; |Δp| ≤ δ counts as flat.
    pub delta: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing_window: usize,
}

fn default_checkpoint_every() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub model: ViTConfig,
    pub train: TrainPolicy,
    pub prune: PruneSchedule,
    pub detect: DetectConfig,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Keep every Nth checkpoint (iteration 0 and the latest always survive).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.prune.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "val_fraction {} outside (0,1)",
                self.data.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.noise.epsilon) {
            return Err(HarnessError::Config(format!(
                "epsilon {} outside [0,1]",
                self.noise.epsilon
            )));
        }
        if self.detect.delta < 0.0 {
            return Err(HarnessError::Config("detect.delta must be >= 0".into()));
        }
        let source_classes = match &self.data.source {
            DataSource::Cifar10 { train_files, .. } => {
                if train_files.is_empty() {
                    return Err(HarnessError::Config("cifar10 needs at least one train file".into()));
                }
                10
            }
            DataSource::Cifar100 { train_files, .. } => {
                if train_files.is_empty() {
                    return Err(HarnessError::Config("cifar100 needs at least one train file".into()));
                }
                100
            }
            DataSource::Synthetic { spec } => spec.num_classes,
        };
        if source_classes != self.model.num_classes {
            return Err(HarnessError::Config(format!(
                "model num_classes {} does not match data classes {}",
                self.model.num_classes, source_classes
            )));
        }
        if let DataSource::Synthetic { spec } = &self.data.source {
            let side = self.model.image_size;
            if spec.height != side || spec.width != side || self.model.channels != 1 {
                return Err(HarnessError::Config(format!(
                    "synthetic {}x{} (1 channel) does not match model {}x{} ({} channels)",
                    spec.height, spec.width, side, side, self.model.channels
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializable").as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializable")
    }
}

/// Desk-scale default: tiny ViT on synthetic 32×32 data. Serves as the
/// starting point users edit; paper-scale presets live in `configs/`.
pub fn default_desk_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig {
            source: DataSource::Synthetic {
                spec: SyntheticSpec {
                    num_classes: 4,
                    num_samples: 4000,
                    height: 32,
                    width: 32,
                    class_signal: 0.3,
                    noise_std: 0.35,
                    seed: 1,
                },
            },
            val_fraction: 0.1,
        },
        noise: NoiseConfig { epsilon: 0.3, external_labels: None },
        model: ViTConfig {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 2.0,
            num_classes: 4,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-5,
        },
        train: TrainPolicy {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Cosine { lr_min: 0.0 },
            epochs: 6,
            batch_size: 64,
            lambda: 1e-3,
            decay_exclude: vec![],
            seed: None,
        },
        prune: PruneSchedule { zeta_iter: 0.2, zeta_end: 0.99, scope: PruneScope::Global },
        detect: DetectConfig { delta: 0.005, smoothing_window: 1 },
        seed: 1,
        out_dir: None,
        checkpoint_every: 5,
    }
}
