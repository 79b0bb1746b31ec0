//! Training configuration and the experiment config document.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::loss::LossWeights;
use crate::nn::ModelConfig;
use crate::scene::SceneSpec;

/// The trainable method zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Density regression on the labeled set only; no segmentation heads.
    LabelOnly,
    /// Inter-relationship-aware self-training on the surrogate tasks.
    Irast,
    /// Surrogate tasks on labeled images only (the multi-task control).
    IrastOnLabel,
    /// Self-training with naive per-predictor thresholding.
    IrastWoIr,
    /// Single multi-class segmentation head with standard self-training.
    Msst,
    /// Ranking loss over nested crops of unlabeled images.
    L2r,
    /// Augmentation-consistency on predicted density maps.
    Uda,
    /// Mean-teacher consistency on predicted density maps.
    Mt,
    /// Interpolation (mixup) consistency on predicted density maps.
    Ict,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::LabelOnly,
        Method::Irast,
        Method::IrastOnLabel,
        Method::IrastWoIr,
        Method::Msst,
        Method::L2r,
        Method::Uda,
        Method::Mt,
        Method::Ict,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::LabelOnly => "label-only",
            Method::Irast => "irast",
            Method::IrastOnLabel => "irast-on-label",
            Method::IrastWoIr => "irast-wo-ir",
            Method::Msst => "msst",
            Method::L2r => "l2r",
            Method::Uda => "uda",
            Method::Mt => "mt",
            Method::Ict => "ict",
        }
    }

    /// Does training draw unlabeled images at all?
    pub fn uses_unlabeled(&self) -> bool {
        !matches!(self, Method::LabelOnly | Method::IrastOnLabel)
    }

    /// Number of segmentation heads and classes per head, given the
    /// surrogate task count `c`.
    pub fn seg_head_plan(&self, c: usize) -> (usize, usize) {
        match self {
            Method::Irast | Method::IrastOnLabel | Method::IrastWoIr => (c, 2),
            Method::Msst => (1, c + 1),
            _ => (0, 2),
        }
    }

    pub fn needs_teacher(&self) -> bool {
        matches!(self, Method::Mt)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                CoreError::invalid(format!("unknown method {:?}; expected one of {:?}", s, names))
            })
    }
}

fn default_t_p() -> f64 {
    0.9
}
fn default_ratios() -> Vec<f64> {
    vec![0.0, 0.5, 0.7]
}
fn default_eval_epochs() -> usize {
    5
}
fn default_sigma() -> f64 {
    1.5
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_ema_alpha() -> f64 {
    0.99
}
fn default_augment_strength() -> f64 {
    1.0
}
fn default_crop_levels() -> usize {
    3
}
fn default_crop_ratio() -> f64 {
    0.75
}
fn default_consistency_weight() -> f64 {
    1.0
}

/// Everything a training run depends on. Together with the dataset on
/// disk, a config + seed fully determines the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halve_epochs: usize,
    #[serde(default = "default_t_p")]
    pub t_p: f64,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset_dir: PathBuf,
    /// Validate (and snapshot the best model) every this many epochs.
    #[serde(default = "default_eval_epochs")]
    pub eval_epochs: usize,
    /// Density kernel standard deviation at label resolution.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Fraction of the labeled split carved off for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_ema_alpha")]
    pub ema_alpha: f64,
    #[serde(default = "default_augment_strength")]
    pub augment_strength: f64,
    #[serde(default = "default_crop_levels")]
    pub crop_levels: usize,
    #[serde(default = "default_crop_ratio")]
    pub crop_ratio: f64,
    /// Weight on the density-level consistency losses (rank/UDA/MT/ICT).
    #[serde(default = "default_consistency_weight")]
    pub consistency_weight: f64,
    /// Use only the first n labeled scenes (for labeled-size ablations).
    #[serde(default)]
    pub max_labeled: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale default budget: 60 epochs x 100 steps, lr 1e-3 halving
    /// every 20 epochs, on the default desk model.
    pub fn default_desk(method: Method, dataset_dir: PathBuf, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 60,
            steps_per_epoch: 100,
            lr: 1e-3,
            lr_halve_epochs: 20,
            t_p: default_t_p(),
            ratios: default_ratios(),
            weights: LossWeights::default(),
            seed,
            model: ModelConfig::default_desk(),
            dataset_dir,
            eval_epochs: default_eval_epochs(),
            sigma: default_sigma(),
            val_fraction: default_val_fraction(),
            ema_alpha: default_ema_alpha(),
            augment_strength: default_augment_strength(),
            crop_levels: default_crop_levels(),
            crop_ratio: default_crop_ratio(),
            consistency_weight: default_consistency_weight(),
            max_labeled: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(CoreError::invalid("epochs and steps_per_epoch must be >= 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.lr_halve_epochs == 0 || self.eval_epochs == 0 {
            return Err(CoreError::invalid(
                "lr_halve_epochs and eval_epochs must be >= 1".to_string(),
            ));
        }
        if !(self.t_p > 0.5 && self.t_p < 1.0) {
            return Err(CoreError::invalid(format!(
                "t_p must lie in (0.5, 1), got {}",
                self.t_p
            )));
        }
        if self.ratios.is_empty() || self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::invalid(format!(
                "ratios must be nonempty and strictly increasing, got {:?}",
                self.ratios
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CoreError::invalid(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(CoreError::invalid(format!(
                "ema_alpha must lie in [0, 1], got {}",
                self.ema_alpha
            )));
        }
        if self.sigma <= 0.0 || self.consistency_weight < 0.0 || self.augment_strength < 0.0 {
            return Err(CoreError::invalid(
                "sigma must be positive; weights/strengths nonnegative".to_string(),
            ));
        }
        self.weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// Schema-versioned experiment document: a training config plus optional
/// dataset-generation parameters and the output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    #[serde(default)]
    pub generate: Option<DatasetSpec>,
    pub output_dir: PathBuf,
}

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(CoreError::invalid(format!(
                "experiment schema version {} not supported (expected {})",
                self.schema_version, EXPERIMENT_SCHEMA_VERSION
            )));
        }
        self.train.validate()?;
        if let Some(gen) = &self.generate {
            gen.validate()?;
        }
        Ok(())
    }
}

/// Scene generator parameters plus split sizes, as consumed by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl DatasetSpec {
    /// The bundled synthetic benchmark: 40 labeled / 200 unlabeled /
    /// 100 test scenes of the default spec.
    pub fn benchmark() -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            n_labeled: 40,
            n_unlabeled: 200,
            n_test: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_labeled == 0 {
            return Err(CoreError::invalid("need at least one labeled scene".to_string()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled + self.n_test
    }
}
