use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::benchmarks::write_if_changed;
use crate::error::{Error, Result};
use crate::methods::{Method, SampleResolver};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Serialized state after one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task_index: usize,
    pub method: String,
    pub seed: u64,
    /// SHA-256 of the resolved run configuration.
    pub config_hash: String,
    pub backbone: BackboneConfig,
    /// Projector weight and bias, row-major.
    pub projector: [Vec<f64>; 2],
    pub method_state: serde_json::Value,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        task_index: usize,
        method: &dyn Method<T>,
        backbone: &Backbone<T>,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        Ok(Self {
            task_index,
            method: method.name().to_owned(),
            seed,
            config_hash,
            backbone: backbone.config().clone(),
            projector: backbone.projector_params().map(|p| p.value.to_f64_vec()),
            method_state: method.save_state()?,
        })
    }
}

pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_if_changed(path, &serde_json::to_vec(checkpoint)?)
}

/// Reads a checkpoint and checks that it was produced with `backbone`'s shape.
pub fn load_checkpoint(path: &Path, stage: usize, backbone: &BackboneConfig) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint { stage, path: path.to_path_buf() });
    }
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checkpoint: Checkpoint = serde_json::from_slice(&text)?;
    if &checkpoint.backbone != backbone {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint backbone {:?} differs from the configured {:?}",
            checkpoint.backbone, backbone
        )));
    }
    Ok(checkpoint)
}

/// Writes a loaded checkpoint back into `method` and the backbone projector.
pub fn restore_checkpoint<T: Scalar>(
    checkpoint: &Checkpoint,
    method: &mut dyn Method<T>,
    backbone: &mut Backbone<T>,
    samples: &SampleResolver<'_>,
) -> Result<()> {
    if &checkpoint.backbone != backbone.config() {
        return Err(Error::ConfigMismatch("checkpoint backbone differs from the live backbone".into()));
    }
    for (param, values) in backbone.projector_params_mut().into_iter().zip(&checkpoint.projector) {
        if values.len() != param.value.len() {
            return Err(Error::ConfigMismatch("projector shape differs".into()));
        }
        let (r, c) = param.value.shape();
        param.value = Tensor::from_f64(r, c, values);
    }
    method.load_state(&checkpoint.method_state, samples)
}
