use serde::{Deserialize, Serialize};

use crate::backbone::PointName;
use crate::error::{Error, Result};
use crate::peft::LoraConfig;

/// Hyperparameters of every built-in method, read from the `[method]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub lora: LoraSettings,
    /// Experts per FFN point for MoE-LoRA.
    pub num_experts: usize,
    pub replay: ReplayConfig,
    pub hide: HideConfig,
    pub clmoe: ClMoeConfig,
    pub disco: DiscoConfig,
    pub modalprompt: ModalPromptConfig,
    pub same: SameConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            lora: LoraSettings::default(),
            num_experts: 4,
            replay: ReplayConfig::default(),
            hide: HideConfig::default(),
            clmoe: ClMoeConfig::default(),
            disco: DiscoConfig::default(),
            modalprompt: ModalPromptConfig::default(),
            same: SameConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self { r: 8, alpha: 16.0, dropout: 0.05 }
    }
}

impl LoraSettings {
    pub fn to_config(&self, targets: &[PointName]) -> LoraConfig {
        LoraConfig { r: self.r, alpha: self.alpha, dropout_p: self.dropout, targets: targets.iter().copied().collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub sample_probability: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 180, sample_probability: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HideConfig {
    /// Weight of image similarity in the combined task score.
    pub image_weight: f64,
}

impl Default for HideConfig {
    fn default() -> Self {
        Self { image_weight: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClMoeConfig {
    pub task_embedding_dim: usize,
}

impl Default for ClMoeConfig {
    fn default() -> Self {
        Self { task_embedding_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoConfig {
    pub tau: f64,
}

impl Default for DiscoConfig {
    fn default() -> Self {
        Self { tau: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalPromptConfig {
    pub prefix_len: usize,
    pub transfer_num: usize,
    pub lambda: f64,
    pub prototype_momentum: f64,
    /// Hidden width of the prompt transform MLP.
    pub transform_hidden: usize,
}

impl Default for ModalPromptConfig {
    fn default() -> Self {
        Self { prefix_len: 10, transfer_num: 1, lambda: 0.5, prototype_momentum: 0.9, transform_hidden: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SameConfig {
    pub tau_score: f64,
    pub mu: f64,
    pub window_size: usize,
    pub max_components: usize,
    pub energy_ratio: f64,
}

impl Default for SameConfig {
    fn default() -> Self {
        Self { tau_score: 0.1, mu: 0.9, window_size: 3, max_components: 64, energy_ratio: 0.9 }
    }
}

impl SameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_ratio > 0.0 && self.energy_ratio <= 1.0) {
            return Err(Error::InvalidConfig { field: "same.energy_ratio", reason: "must lie in (0, 1]".into() });
        }
        if self.window_size < 2 {
            return Err(Error::InvalidConfig { field: "same.window_size", reason: "must be at least 2".into() });
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::InvalidConfig { field: "same.mu", reason: "must lie in [0, 1)".into() });
        }
        Ok(())
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replay.sample_probability) {
            return Err(Error::InvalidConfig { field: "replay.sample_probability", reason: "must lie in [0, 1]".into() });
        }
        if !(self.disco.tau > 0.0) {
            return Err(Error::InvalidConfig { field: "disco.tau", reason: "must be positive".into() });
        }
        if !(0.0..=1.0).contains(&self.modalprompt.lambda) {
            return Err(Error::InvalidConfig { field: "modalprompt.lambda", reason: "must lie in [0, 1]".into() });
        }
        if self.modalprompt.prefix_len == 0 || self.modalprompt.transfer_num == 0 {
            return Err(Error::InvalidConfig {
                field: "modalprompt.prefix_len",
                reason: "prefix_len and transfer_num must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.hide.image_weight) {
            return Err(Error::InvalidConfig { field: "hide.image_weight", reason: "must lie in [0, 1]".into() });
        }
        self.same.validate()
    }
}
