//! Desk-scale multimodal backbone: a frozen feature extractor, a trainable
//! visual projector, and a small causal transformer language model whose
//! linear maps are exposed as named injection points.

mod model;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Backbone, ForwardOutput, Mode, Overlay, OverlayCtx, SampleForward, SequenceLayout};
pub use tokenizer::ByteTokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub image_feature_dim: usize,
    pub num_visual_tokens: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 2048,
            image_feature_dim: 32,
            num_visual_tokens: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("image_feature_dim", self.image_feature_dim),
            ("num_visual_tokens", self.num_visual_tokens),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig { field, reason: "must be positive".into() });
            }
        }
        if self.vocab_size < 256 {
            return Err(Error::InvalidConfig {
                field: "vocab_size",
                reason: format!("byte-level tokenizer needs at least 256 ids, got {}", self.vocab_size),
            });
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig {
                field: "num_heads",
                reason: format!("model_dim {} is not divisible by {}", self.model_dim, self.num_heads),
            });
        }
        Ok(())
    }

    /// Dimension of the frozen routing feature space (image and text).
    pub fn feature_dim(&self) -> usize {
        self.image_feature_dim
    }

    pub fn injection_points(&self) -> Vec<InjectionPoint> {
        (0..self.num_layers)
            .flat_map(|layer| PointName::ALL.iter().map(move |&name| self.point(layer, name)))
            .collect()
    }

    pub fn point(&self, layer: usize, name: PointName) -> InjectionPoint {
        let (d, f) = (self.model_dim, self.ffn_dim);
        let (in_dim, out_dim) = match name {
            PointName::QProj | PointName::KProj | PointName::VProj | PointName::OProj => (d, d),
            PointName::GateProj | PointName::UpProj => (d, f),
            PointName::DownProj => (f, d),
        };
        InjectionPoint { layer, name, in_dim, out_dim }
    }
}

/// The seven linear maps of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointName {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl PointName {
    pub const ALL: [PointName; 7] = [
        PointName::QProj,
        PointName::KProj,
        PointName::VProj,
        PointName::OProj,
        PointName::GateProj,
        PointName::UpProj,
        PointName::DownProj,
    ];

    pub const FFN: [PointName; 3] = [PointName::GateProj, PointName::UpProj, PointName::DownProj];

    pub fn as_str(self) -> &'static str {
        match self {
            PointName::QProj => "q_proj",
            PointName::KProj => "k_proj",
            PointName::VProj => "v_proj",
            PointName::OProj => "o_proj",
            PointName::GateProj => "gate_proj",
            PointName::UpProj => "up_proj",
            PointName::DownProj => "down_proj",
        }
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, PointName::GateProj | PointName::UpProj | PointName::DownProj)
    }
}

impl fmt::Display for PointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PointName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PointName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownTarget(s.to_owned()))
    }
}

/// A named base weight matrix: `(layer, name)` is unique per backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InjectionPoint {
    pub layer: usize,
    pub name: PointName,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl InjectionPoint {
    pub fn key(&self) -> (usize, PointName) {
        (self.layer, self.name)
    }
}

/// One instruction-following example. Feature vectors are stored as `f64`
/// on disk and converted to the model scalar on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f64>>,
    pub instruction: String,
    pub answer: String,
    pub task_name: String,
}

impl MultimodalSample {
    pub fn text_only(id: &str, instruction: &str, answer: &str, task: &str) -> Self {
        Self {
            sample_id: id.into(),
            image_features: None,
            instruction: instruction.into(),
            answer: answer.into(),
            task_name: task.into(),
        }
    }

    pub fn with_image(id: &str, features: Vec<f64>, instruction: &str, answer: &str, task: &str) -> Self {
        Self { image_features: Some(features), ..Self::text_only(id, instruction, answer, task) }
    }
}
