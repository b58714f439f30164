//! Methods built on a single shared adapter bank: zero-shot, FT-LoRA,
//! Replay-LoRA, MoE-LoRA and CL-MoE.

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    derived_rng, from_field, Method, MethodContext, Policy, ReplayBuffer, ReplaySidecar, SampleResolver, StaticMix,
    TaskInfo,
};
use crate::autograd::{Param, ParamGroup, Tape, Var};
use crate::backbone::{Backbone, InjectionPoint, Mode, MultimodalSample, Overlay, OverlayCtx, PointName};
use crate::error::{Error, Result};
use crate::peft::{trainable_param_count, AdapterBank, BankRecord, ExpertMix, LoraConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const REPLAY_STREAM: u64 = 0x5245_504c;

/// The frozen pre-trained backbone, evaluated without any adaptation.
pub struct ZeroShot {
    name: String,
}

impl ZeroShot {
    pub fn new<T: Scalar>(ctx: &MethodContext<'_, T>) -> Self {
        Self { name: ctx.name.to_owned() }
    }
}

impl<T: Scalar> Method<T> for ZeroShot {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_training(&self) -> bool {
        false
    }

    fn on_task_start(&mut self, _: &Backbone<T>, _: &TaskInfo<'_>) -> Result<()> {
        Err(Error::AttemptedTraining(self.name.clone()))
    }

    fn policy<'a>(&'a self, _: &'a Backbone<T>, _: &MultimodalSample, _: Mode) -> Result<Policy<'a, T>> {
        Ok(Policy::none())
    }

    fn on_task_end(&mut self, _: &Backbone<T>, _: &TaskInfo<'_>) -> Result<()> {
        Err(Error::AttemptedTraining(self.name.clone()))
    }

    fn visit_params(&self, _: &mut dyn FnMut(&Param<T>)) {}

    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&mut Param<T>)) {}

    fn trainable_param_count(&self) -> usize {
        0
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(json!({}))
    }

    fn load_state(&mut self, _: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        Ok(())
    }
}

fn save_replay(replay: &Option<ReplayBuffer>) -> serde_json::Value {
    replay.as_ref().map_or(serde_json::Value::Null, |b| json!(b.sidecar()))
}

fn load_replay(
    replay: &mut Option<ReplayBuffer>,
    state: &serde_json::Value,
    samples: &SampleResolver<'_>,
) -> Result<()> {
    if let Some(buf) = replay {
        let side: ReplaySidecar = from_field(state, "replay")?;
        *buf = ReplayBuffer::from_sidecar(&side, samples)?;
    }
    Ok(())
}

fn store_replay(replay: &mut Option<ReplayBuffer>, seed: u64, task: &TaskInfo<'_>) {
    if let Some(buf) = replay {
        let mut rng = derived_rng(seed, REPLAY_STREAM + task.index as u64);
        buf.store(task.index, task.train, task.num_tasks, &mut rng);
    }
}

/// One adapter per injection point, trained continuously across tasks;
/// optionally with a task-partitioned replay buffer.
pub struct FtLora<T: Scalar> {
    name: String,
    bank: AdapterBank<T>,
    replay: Option<ReplayBuffer>,
    current_task: usize,
    seed: u64,
}

impl<T: Scalar> FtLora<T> {
    pub fn new(ctx: &MethodContext<'_, T>, with_replay: bool) -> Result<Self> {
        let cfg = ctx.config.lora.to_config(&PointName::ALL);
        let replay = with_replay.then(|| ReplayBuffer::new(ctx.config.replay.capacity, ctx.config.replay.sample_probability));
        Ok(Self {
            name: ctx.name.to_owned(),
            bank: AdapterBank::inject(ctx.backbone, &cfg, 1, ctx.seed)?,
            replay,
            current_task: 0,
            seed: ctx.seed,
        })
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.bank
    }
}

impl<T: Scalar> Method<T> for FtLora<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        self.current_task = task.index;
        Ok(())
    }

    fn transform_batch(&mut self, batch: Vec<MultimodalSample>, rng: &mut ChaCha8Rng) -> Vec<MultimodalSample> {
        match &self.replay {
            Some(buf) => buf.mix(batch, self.current_task, rng),
            None => batch,
        }
    }

    fn policy<'a>(&'a self, _: &'a Backbone<T>, _: &MultimodalSample, _: Mode) -> Result<Policy<'a, T>> {
        let overlay = StaticMix { bank: &self.bank, mix: ExpertMix::Sum(vec![0]), last_layer: None };
        Ok(Policy { overlay: Some(Box::new(overlay)), prefix: Vec::new() })
    }

    fn on_task_end(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        store_replay(&mut self.replay, self.seed, task);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bank.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bank.visit_params_mut(f);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.bank)
    }

    fn replay_buffer(&self) -> Option<&ReplayBuffer> {
        self.replay.as_ref()
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(json!({ "bank": self.bank.to_record(), "replay": save_replay(&self.replay) }))
    }

    fn load_state(&mut self, state: &serde_json::Value, samples: &SampleResolver<'_>) -> Result<()> {
        self.bank.load_record(&from_field::<BankRecord>(state, "bank")?)?;
        load_replay(&mut self.replay, state, samples)
    }
}

/// FFN experts mixed by a soft router reading the pooled instruction.
pub struct MoeLora<T: Scalar> {
    name: String,
    bank: AdapterBank<T>,
}

struct MoeOverlay<'a, T: Scalar> {
    bank: &'a AdapterBank<T>,
}

impl<'a, T: Scalar> Overlay<'a, T> for MoeOverlay<'a, T> {
    fn delta(
        &self,
        tape: &mut Tape<'a, T>,
        point: InjectionPoint,
        x: Var,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Option<Var>> {
        let Some(pa) = self.bank.get(point.layer, point.name) else { return Ok(None) };
        let router = tape.param(pa.router.as_ref().expect("moe router attached"));
        let logits = tape.matmul_t(ctx.pooled_instruction, router);
        let w = tape.softmax_rows(logits);
        let rows = tape.value(x).rows();
        let w = tape.repeat_rows(w, rows);
        let dropout = ctx.dropout.as_deref_mut().map(|rng| (self.bank.dropout_p(), rng));
        Ok(pa.delta(tape, x, &ExpertMix::PerToken(w), dropout))
    }
}

impl<T: Scalar> MoeLora<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let cfg = ctx.config.lora.to_config(&PointName::FFN);
        let mut bank = AdapterBank::inject(ctx.backbone, &cfg, ctx.config.num_experts, ctx.seed)?;
        let d = ctx.backbone.config().model_dim;
        bank.attach_routers(|_| d);
        Ok(Self { name: ctx.name.to_owned(), bank })
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.bank
    }
}

impl<T: Scalar> Method<T> for MoeLora<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, _: &TaskInfo<'_>) -> Result<()> {
        Ok(())
    }

    fn policy<'a>(&'a self, _: &'a Backbone<T>, _: &MultimodalSample, _: Mode) -> Result<Policy<'a, T>> {
        Ok(Policy { overlay: Some(Box::new(MoeOverlay { bank: &self.bank })), prefix: Vec::new() })
    }

    fn on_task_end(&mut self, _: &Backbone<T>, _: &TaskInfo<'_>) -> Result<()> {
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bank.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bank.visit_params_mut(f);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.bank)
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(json!({ "bank": self.bank.to_record() }))
    }

    fn load_state(&mut self, state: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        self.bank.load_record(&from_field::<BankRecord>(state, "bank")?)
    }
}

/// Per-token FFN expert routing conditioned on a learned task embedding,
/// combined with replay.
pub struct ClMoe<T: Scalar> {
    name: String,
    bank: AdapterBank<T>,
    task_embeddings: Param<T>,
    replay: Option<ReplayBuffer>,
    current_task: usize,
    learned: usize,
    seed: u64,
}

#[derive(Clone, Copy)]
enum TaskSlot {
    Current(usize),
    /// Mean over the first `n` learned embeddings.
    Mean(usize),
}

struct ClMoeOverlay<'a, T: Scalar> {
    bank: &'a AdapterBank<T>,
    table: &'a Param<T>,
    slot: TaskSlot,
}

impl<'a, T: Scalar> Overlay<'a, T> for ClMoeOverlay<'a, T> {
    fn delta(
        &self,
        tape: &mut Tape<'a, T>,
        point: InjectionPoint,
        x: Var,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Option<Var>> {
        let Some(pa) = self.bank.get(point.layer, point.name) else { return Ok(None) };
        let table = tape.param(self.table);
        let emb = match self.slot {
            TaskSlot::Current(t) => tape.slice_rows(table, t, t + 1),
            TaskSlot::Mean(0) => tape.constant(Tensor::zeros(1, self.table.value.cols())),
            TaskSlot::Mean(n) => {
                let rows = tape.slice_rows(table, 0, n);
                tape.mean_rows(rows)
            }
        };
        let rows = tape.value(x).rows();
        let emb = tape.repeat_rows(emb, rows);
        let input = tape.concat_cols(x, emb);
        let router = tape.param(pa.router.as_ref().expect("clmoe router attached"));
        let logits = tape.matmul_t(input, router);
        let w = tape.softmax_rows(logits);
        let dropout = ctx.dropout.as_deref_mut().map(|rng| (self.bank.dropout_p(), rng));
        Ok(pa.delta(tape, x, &ExpertMix::PerToken(w), dropout))
    }
}

impl<T: Scalar> ClMoe<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        let lora = &ctx.config.lora;
        let per_expert = (lora.r / n).max(1);
        let cfg = LoraConfig { r: per_expert * n, ..lora.to_config(&PointName::FFN) };
        let mut bank = AdapterBank::inject(ctx.backbone, &cfg, n, ctx.seed)?;
        let e = ctx.config.clmoe.task_embedding_dim;
        bank.attach_routers(|p| p.in_dim + e);
        let mut rng = derived_rng(ctx.seed, 0x434c_4d4f);
        let table = Tensor::randn(n, e, 1.0 / (e as f64).sqrt(), &mut rng);
        let replay = Some(ReplayBuffer::new(ctx.config.replay.capacity, ctx.config.replay.sample_probability));
        Ok(Self {
            name: ctx.name.to_owned(),
            bank,
            task_embeddings: Param::new(table, ParamGroup::Adapter),
            replay,
            current_task: 0,
            learned: 0,
            seed: ctx.seed,
        })
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.bank
    }

    pub fn task_embeddings(&self) -> &Param<T> {
        &self.task_embeddings
    }
}

impl<T: Scalar> Method<T> for ClMoe<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        if task.index >= self.task_embeddings.value.rows() {
            return Err(Error::InvalidConfig {
                field: "num_tasks",
                reason: format!("task {} exceeds the {} task embeddings", task.index, self.task_embeddings.value.rows()),
            });
        }
        self.current_task = task.index;
        Ok(())
    }

    fn transform_batch(&mut self, batch: Vec<MultimodalSample>, rng: &mut ChaCha8Rng) -> Vec<MultimodalSample> {
        match &self.replay {
            Some(buf) => buf.mix(batch, self.current_task, rng),
            None => batch,
        }
    }

    fn policy<'a>(&'a self, _: &'a Backbone<T>, _: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>> {
        let slot = match mode {
            Mode::Train => TaskSlot::Current(self.current_task),
            Mode::Eval => TaskSlot::Mean(self.learned),
        };
        let overlay = ClMoeOverlay { bank: &self.bank, table: &self.task_embeddings, slot };
        Ok(Policy { overlay: Some(Box::new(overlay)), prefix: Vec::new() })
    }

    fn on_task_end(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        store_replay(&mut self.replay, self.seed, task);
        self.learned = self.learned.max(task.index + 1);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bank.visit_params(f);
        f(&self.task_embeddings);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bank.visit_params_mut(f);
        f(&mut self.task_embeddings);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.bank) + self.task_embeddings.numel()
    }

    fn replay_buffer(&self) -> Option<&ReplayBuffer> {
        self.replay.as_ref()
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(json!({
            "bank": self.bank.to_record(),
            "task_embeddings": self.task_embeddings.value.to_f64_vec(),
            "learned": self.learned,
            "replay": save_replay(&self.replay),
        }))
    }

    fn load_state(&mut self, state: &serde_json::Value, samples: &SampleResolver<'_>) -> Result<()> {
        self.bank.load_record(&from_field::<BankRecord>(state, "bank")?)?;
        let table: Vec<f64> = from_field(state, "task_embeddings")?;
        let (r, c) = self.task_embeddings.value.shape();
        if table.len() != r * c {
            return Err(Error::ConfigMismatch("task embedding table shape".into()));
        }
        self.task_embeddings.value = Tensor::from_f64(r, c, &table);
        self.learned = from_field(state, "learned")?;
        load_replay(&mut self.replay, state, samples)
    }
}
