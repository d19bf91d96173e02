use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreKind;
use crate::sparsity::PruneConfig;
use crate::tape::KlDirection;
use crate::vit::{MaskMode, ModelConfig};

/// Threshold fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the budget term.
    pub lambda_flops: f64,
    /// Weight of the distillation term.
    pub lambda_distill: f64,
    /// Initial learning rate of the backbone, cosine-decayed to `min_lr`.
    pub lr: f64,
    pub min_lr: f64,
    /// Decoupled weight decay of the backbone. Thresholds are never decayed.
    pub weight_decay: f64,
    /// Initial learning rate of the thresholds, cosine-decayed to
    /// `theta_min_lr`.
    pub theta_lr: f64,
    pub theta_min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kl_direction: KlDirection,
    /// Train thresholds only.
    pub freeze_backbone: bool,
    /// Stop gradients from the masks into the backbone through the scores.
    pub detach_score: bool,
    pub mask_mode: MaskMode,
    pub score: ScoreKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_flops: 2.0,
            lambda_distill: 0.5,
            lr: 2e-5,
            min_lr: 2e-6,
            weight_decay: 1e-6,
            theta_lr: 5e-4,
            theta_min_lr: 5e-5,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            kl_direction: KlDirection::TeacherStudent,
            freeze_backbone: false,
            detach_score: false,
            mask_mode: MaskMode::Ste,
            score: ScoreKind::HeadWeighted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda_flops < 0.0 || self.lambda_distill < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("min_lr", self.min_lr),
            ("theta_lr", self.theta_lr),
            ("theta_min_lr", self.theta_min_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Dense training of the backbone that later serves as teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Directory with the CIFAR-10 binary batches; ignored for synthetic
    /// data.
    #[serde(default)]
    pub cifar_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_size: 1024,
            eval_size: 512,
            seed: 0,
            cifar_dir: None,
        }
    }
}

/// Everything a training run reads from its configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses TOML. Every key is required apart from `data.cifar_dir`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate(self.model.num_layers)?;
        self.train.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        Ok(())
    }
}
