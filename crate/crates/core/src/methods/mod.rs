//! Continual-learning methods behind one lifecycle contract.

pub mod config;
mod experts;
mod lora;
mod modalprompt;
pub mod replay;
pub mod routing;
pub mod spectral;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Param, Tape, Var};
use crate::backbone::{Backbone, InjectionPoint, Mode, MultimodalSample, Overlay, OverlayCtx};
use crate::error::{Error, Result};
use crate::peft::{AdapterBank, ExpertMix};
use crate::scalar::Scalar;

pub use config::{
    ClMoeConfig, DiscoConfig, HideConfig, LoraSettings, MethodConfig, ModalPromptConfig, ReplayConfig, SameConfig,
};
pub use experts::{Disco, Hide, Same};
pub use lora::{ClMoe, FtLora, MoeLora, ZeroShot};
pub use modalprompt::{alignment_loss, ModalPrompt, TransformMlp};
pub use replay::{ReplayBuffer, ReplaySidecar};

/// Names of the built-in lifecycle implementations a plugin may bind to.
pub const CATALOG: [&str; 9] = ["clmoe", "disco", "ftlora", "hide", "modalprompt", "moelora", "replay", "same", "zeroshot"];

/// Everything a method factory sees when building its state.
pub struct MethodContext<'b, T: Scalar> {
    /// Name the method was registered under.
    pub name: &'b str,
    pub backbone: &'b Backbone<T>,
    pub config: &'b MethodConfig,
    /// Number of tasks in the benchmark stream.
    pub num_tasks: usize,
    pub seed: u64,
}

/// The task a lifecycle hook is called for.
pub struct TaskInfo<'d> {
    pub index: usize,
    pub name: &'d str,
    pub num_tasks: usize,
    pub train: &'d [MultimodalSample],
    /// Optimizer steps scheduled for this task.
    pub total_steps: usize,
}

/// Per-sample forward configuration: an adapter overlay and soft-prompt prefix.
pub struct Policy<'a, T: Scalar> {
    pub overlay: Option<Box<dyn Overlay<'a, T> + 'a>>,
    /// Prompt parameters concatenated row-wise in front of the sequence.
    pub prefix: Vec<&'a Param<T>>,
}

impl<T: Scalar> Policy<'_, T> {
    pub fn none() -> Self {
        Self { overlay: None, prefix: Vec::new() }
    }
}

pub type SampleResolver<'r> = dyn Fn(&str) -> Option<MultimodalSample> + 'r;

/// Lifecycle contract shared by every method plugin.
pub trait Method<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn supports_training(&self) -> bool {
        true
    }

    fn on_task_start(&mut self, backbone: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()>;

    /// Rewrites a training batch before the forward pass (replay mixing).
    fn transform_batch(&mut self, batch: Vec<MultimodalSample>, _rng: &mut ChaCha8Rng) -> Vec<MultimodalSample> {
        batch
    }

    /// Overlay and prefix for one sample. Deterministic in eval mode.
    fn policy<'a>(&'a self, backbone: &'a Backbone<T>, sample: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>>;

    /// Extra loss term for a training micro-batch.
    fn auxiliary_loss<'a>(
        &'a self,
        _tape: &mut Tape<'a, T>,
        _backbone: &'a Backbone<T>,
        _batch: &[MultimodalSample],
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Called once per training micro-batch after its backward pass.
    fn observe_batch(&mut self, _backbone: &Backbone<T>, _batch: &[MultimodalSample]) -> Result<()> {
        Ok(())
    }

    /// May edit accumulated gradients before the optimizer applies them.
    fn before_optimizer_step(&mut self, _step: usize) -> Result<()> {
        Ok(())
    }

    fn after_optimizer_step(&mut self, _step: usize) -> Result<()> {
        Ok(())
    }

    fn on_task_end(&mut self, backbone: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()>;

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Exact number of trainable scalars the method owns.
    fn trainable_param_count(&self) -> usize;

    fn replay_buffer(&self) -> Option<&ReplayBuffer> {
        None
    }

    fn save_state(&self) -> Result<serde_json::Value>;

    fn load_state(&mut self, state: &serde_json::Value, samples: &SampleResolver<'_>) -> Result<()>;
}

/// Builds a built-in lifecycle by catalog name.
pub fn build_method<T: Scalar>(implementation: &str, ctx: &MethodContext<'_, T>) -> Result<Box<dyn Method<T>>> {
    ctx.config.validate()?;
    Ok(match implementation {
        "zeroshot" => Box::new(ZeroShot::new(ctx)),
        "ftlora" => Box::new(FtLora::new(ctx, false)?),
        "replay" => Box::new(FtLora::new(ctx, true)?),
        "moelora" => Box::new(MoeLora::new(ctx)?),
        "clmoe" => Box::new(ClMoe::new(ctx)?),
        "hide" => Box::new(Hide::new(ctx)?),
        "disco" => Box::new(Disco::new(ctx)?),
        "modalprompt" => Box::new(ModalPrompt::new(ctx)?),
        "same" => Box::new(Same::new(ctx)?),
        other => {
            return Err(Error::PluginLoad {
                plugin: ctx.name.to_owned(),
                message: format!("unknown implementation `{other}`; available: {}", CATALOG.join(", ")),
            })
        }
    })
}

/// Overlay that applies fixed expert selections, optionally different on
/// the final transformer block.
pub(crate) struct StaticMix<'a, T: Scalar> {
    pub bank: &'a AdapterBank<T>,
    pub mix: ExpertMix<T>,
    pub last_layer: Option<ExpertMix<T>>,
}

impl<'a, T: Scalar> Overlay<'a, T> for StaticMix<'a, T> {
    fn delta(
        &self,
        tape: &mut Tape<'a, T>,
        point: InjectionPoint,
        x: Var,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Option<Var>> {
        let Some(pa) = self.bank.get(point.layer, point.name) else { return Ok(None) };
        let mix = match &self.last_layer {
            Some(last) if point.layer + 1 == ctx.num_layers => last,
            _ => &self.mix,
        };
        let dropout = ctx.dropout.as_deref_mut().map(|rng| (self.bank.dropout_p(), rng));
        Ok(pa.delta(tape, x, mix, dropout))
    }
}

pub(crate) fn state_field<'v>(state: &'v serde_json::Value, key: &str) -> Result<&'v serde_json::Value> {
    state.get(key).ok_or_else(|| Error::ConfigMismatch(format!("method state lacks `{key}`")))
}

pub(crate) fn from_field<D: serde::de::DeserializeOwned>(state: &serde_json::Value, key: &str) -> Result<D> {
    Ok(serde_json::from_value(state_field(state, key)?.clone())?)
}

/// Independent generator for `(seed, stream)`.
pub(crate) fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
