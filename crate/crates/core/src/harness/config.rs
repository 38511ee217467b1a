use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::targets::SigmaRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Strong,
    Weak,
}

/// Regression target of the strong stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Cardinality,
    Density,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub target: TargetKind,
    /// Kernel bandwidth rule, used only with the density target.
    pub sigma: SigmaRule,
    pub weights: LossWeights,
    pub lr_heads: f64,
    pub lr_trunk: f64,
    /// Keep the category embedding table fixed.
    pub freeze_embedding: bool,
    pub epochs: usize,
    /// Leading strong-stage epochs that fit the count map with squared
    /// error before switching to absolute error. Ignored in the weak stage.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Multiplier applied to both rates at the last epoch; the rates decay
    /// geometrically in between. 1.0 keeps them constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Strong,
            target: TargetKind::Cardinality,
            sigma: SigmaRule::default(),
            weights: LossWeights::default(),
            lr_heads: 1e-3,
            lr_trunk: 1e-4,
            freeze_embedding: false,
            epochs: 20,
            warmup_epochs: 1,
            batch_size: 16,
            patience: 5,
            final_lr_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lr_heads > 0.0 && self.lr_trunk > 0.0) || !self.lr_heads.is_finite() || !self.lr_trunk.is_finite() {
            return bad(format!(
                "learning rates must be > 0, got heads={} trunk={}",
                self.lr_heads, self.lr_trunk
            ));
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1".into());
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad(format!("final_lr_fraction {} outside (0, 1]", self.final_lr_fraction));
        }
        Ok(())
    }

    /// Strong and weak sample counts of one batch in the weak stage.
    pub fn batch_mix(&self) -> (usize, usize) {
        match self.stage {
            Stage::Strong => (self.batch_size, 0),
            Stage::Weak => {
                let strong = (self.weights.gamma * self.batch_size as f64).round() as usize;
                (strong, self.batch_size - strong.min(self.batch_size))
            }
        }
    }

    /// Rate multiplier for `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return 1.0;
        }
        self.final_lr_fraction.powf(epoch as f64 / (self.epochs - 1) as f64)
    }
}
