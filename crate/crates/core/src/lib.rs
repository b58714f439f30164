//! Continual instruction tuning for multimodal models on a small, CPU-only backbone.
//!
//! Methods, benchmarks and backbones live in a [`registry`] and are selected by
//! name; external plugins register through `integration.toml` files.
//! The numerical core is generic over [`scalar::Scalar`]; the aliases below fix it to `f64`.

pub mod autograd;
pub mod backbone;
pub mod benchmarks;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod methods;
pub mod peft;
pub mod registry;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Backbone = backbone::Backbone<f64>;
pub type AdapterBank = peft::AdapterBank<f64>;
pub type LoraAdapter = peft::LoraAdapter<f64>;
pub type Registry = registry::Registry<f64>;
pub type FrozenRegistry = registry::FrozenRegistry<f64>;
pub type BoxedMethod = Box<dyn methods::Method<f64>>;
