//! Sequential training, stagewise evaluation and checkpoints.

mod checkpoint;
mod run;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Param, ParamGroup, ParamId, Tape, Var};
use crate::backbone::{Backbone, Mode, MultimodalSample};
use crate::benchmarks::{BenchmarkSpec, Stage};
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::evaluation::{score_task, Prediction};
use crate::methods::{derived_rng, Method, Policy, TaskInfo};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{config_hash, load_checkpoint, restore_checkpoint, save_checkpoint, Checkpoint};
pub use run::{execute, RunContext, RunMode, RunOutcome, RunState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub projector_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Accepted for compatibility; has no effect.
    pub bf16: bool,
    /// Accepted for compatibility; has no effect.
    pub gradient_checkpointing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            projector_lr: 2e-5,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 8,
            grad_accum_steps: 1,
            max_grad_norm: None,
            bf16: false,
            gradient_checkpointing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, reason: &str| Err(Error::InvalidConfig { field, reason: reason.into() });
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return invalid("train.warmup_ratio", "must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return invalid("train.epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return invalid("train.batch_size", "must be at least 1");
        }
        if self.grad_accum_steps == 0 {
            return invalid("train.grad_accum_steps", "must be at least 1");
        }
        if self.lr < 0.0 || self.projector_lr < 0.0 || self.weight_decay < 0.0 {
            return invalid("train.lr", "learning rates and weight decay must be nonnegative");
        }
        if self.max_grad_norm.is_some_and(|n| n <= 0.0) {
            return invalid("train.max_grad_norm", "must be positive");
        }
        Ok(())
    }

    /// Optimizer steps for a task with `num_batches` micro-batches per epoch.
    pub fn total_steps(&self, num_batches: usize) -> usize {
        self.epochs * num_batches.div_ceil(self.grad_accum_steps)
    }
}

/// Linear warmup over `ceil(warmup_ratio · total)` steps, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: HashMap::new() }
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, p: &mut Param<T>, lr: f64) {
        if !p.trainable {
            return;
        }
        let (rows, cols) = p.value.shape();
        let (m, v) = self.moments.entry(p.id()).or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(self.eps), T::lit(lr * self.weight_decay));
        let one = T::one();
        for (((w, &g), m), v) in
            p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn answer_tokens<T: Scalar>(backbone: &Backbone<T>, batch: &[MultimodalSample]) -> usize {
    let tok = backbone.tokenizer();
    batch.iter().map(|s| tok.tokenize(&s.answer).len() + 1).sum()
}

fn prefix_var<'a, T: Scalar>(tape: &mut Tape<'a, T>, policy: &Policy<'a, T>) -> Option<Var> {
    if policy.prefix.is_empty() {
        return None;
    }
    let parts: Vec<Var> = policy.prefix.iter().map(|p| tape.param(p)).collect();
    Some(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) })
}

fn prefix_tensor<T: Scalar>(policy: &Policy<'_, T>) -> Option<Tensor<T>> {
    let first = policy.prefix.first()?;
    let cols = first.value.cols();
    let data: Vec<T> = policy.prefix.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    Some(Tensor::from_vec(data.len() / cols, cols, data))
}

/// Loss and parameter gradients of one micro-batch; `denominator` is the
/// answer-token count of the whole accumulation window.
fn micro_batch<T: Scalar>(
    method: &dyn Method<T>,
    backbone: &Backbone<T>,
    batch: &[MultimodalSample],
    denominator: usize,
    accum: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, HashMap<ParamId, Tensor<T>>)> {
    let mut tape = Tape::new();
    let mut sum: Option<Var> = None;
    for sample in batch {
        let policy = method.policy(backbone, sample, Mode::Train)?;
        let prefix = prefix_var(&mut tape, &policy);
        let out = backbone.forward_sample(
            &mut tape,
            sample,
            policy.overlay.as_deref(),
            prefix,
            Mode::Train,
            Some(&mut *rng),
            false,
        )?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, out.loss_sum),
            None => out.loss_sum,
        });
    }
    let Some(sum) = sum else { return Err(Error::EmptyBatch) };
    let mut loss = tape.scale(sum, T::lit(1.0 / denominator as f64));
    if let Some(aux) = method.auxiliary_loss(&mut tape, backbone, batch)? {
        let aux = tape.scale(aux, T::lit(1.0 / accum as f64));
        loss = tape.add(loss, aux);
    }
    let value = tape.value(loss).get(0, 0).to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::Internal(format!("non-finite training loss {value}")));
    }
    tape.backward(loss);
    Ok((value, tape.into_param_grads()))
}

fn visit_all_mut<T: Scalar>(method: &mut dyn Method<T>, backbone: &mut Backbone<T>, f: &mut dyn FnMut(&mut Param<T>)) {
    method.visit_params_mut(f);
    for p in backbone.projector_params_mut() {
        f(p);
    }
}

/// Trains `method` on one stage and returns the per-step log.
pub fn train_task<T: Scalar>(
    method: &mut dyn Method<T>,
    backbone: &mut Backbone<T>,
    stage: &Stage,
    num_tasks: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    if !method.supports_training() {
        return Err(Error::MethodRefusesTraining(method.name().to_owned()));
    }
    config.validate()?;
    let train = stage.train.samples();
    if train.is_empty() {
        return Err(Error::EmptyTask(stage.manifest.task_name.clone()));
    }
    let total_steps = config.total_steps(stage.train.num_batches());
    let info = TaskInfo {
        index: stage.task_index,
        name: &stage.manifest.task_name,
        num_tasks,
        train,
        total_steps,
    };
    method.on_task_start(backbone, &info)?;
    let mut optimizer = AdamW::new(config.weight_decay);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let stream = |step: usize, salt: u64| ((stage.task_index as u64) << 40) | ((step as u64) << 2) | salt;
    for epoch in 0..config.epochs {
        let batches = stage.train.epoch(epoch);
        for window in batches.chunks(config.grad_accum_steps) {
            let mut mix_rng = derived_rng(seed, stream(step, 1));
            let micro: Vec<Vec<MultimodalSample>> =
                window.iter().map(|b| method.transform_batch(b.clone(), &mut mix_rng)).collect();
            let denominator = micro.iter().map(|b| answer_tokens(backbone, b)).sum::<usize>().max(1);
            visit_all_mut(method, backbone, &mut |p| p.zero_grad());
            let mut dropout_rng = derived_rng(seed, stream(step, 2));
            let mut step_loss = 0.0;
            for batch in &micro {
                let (loss, grads) = micro_batch(&*method, backbone, batch, denominator, micro.len(), &mut dropout_rng)?;
                step_loss += loss;
                visit_all_mut(method, backbone, &mut |p| {
                    if let Some(g) = grads.get(&p.id()) {
                        p.grad.add_assign(g);
                    }
                });
                method.observe_batch(backbone, batch)?;
            }
            if let Some(max_norm) = config.max_grad_norm {
                clip_grad_norm(method, backbone, max_norm);
            }
            method.before_optimizer_step(step)?;
            optimizer.begin_step();
            let lr = lr_at(step, total_steps, config.lr, config.warmup_ratio);
            let projector_lr = lr_at(step, total_steps, config.projector_lr, config.warmup_ratio);
            visit_all_mut(method, backbone, &mut |p| {
                let rate = match p.group {
                    ParamGroup::Adapter => lr,
                    ParamGroup::Projector => projector_lr,
                };
                optimizer.update(p, rate);
            });
            method.after_optimizer_step(step)?;
            log.push(StepRecord { task: stage.task_index, epoch, step, lr, loss: step_loss });
            step += 1;
        }
    }
    method.on_task_end(backbone, &info)?;
    Ok(log)
}

fn clip_grad_norm<T: Scalar>(method: &mut dyn Method<T>, backbone: &mut Backbone<T>, max_norm: f64) {
    let mut sq = 0.0;
    visit_all_mut(method, backbone, &mut |p| {
        if p.trainable {
            sq += p.grad.data().iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        visit_all_mut(method, backbone, &mut |p| {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        });
    }
}

/// Greedy answer for one sample under the method's eval-mode policy.
pub fn predict<T: Scalar>(
    method: &dyn Method<T>,
    backbone: &Backbone<T>,
    sample: &MultimodalSample,
    max_new_tokens: usize,
) -> Result<String> {
    let policy = method.policy(backbone, sample, Mode::Eval)?;
    let prefix = prefix_tensor(&policy);
    backbone.generate(sample, policy.overlay.as_deref(), prefix.as_ref(), max_new_tokens)
}

/// Scores of tasks `0..=stage` (one matrix row) and the predictions behind them.
pub fn evaluate_stage<T: Scalar>(
    method: &dyn Method<T>,
    backbone: &Backbone<T>,
    spec: &BenchmarkSpec,
    stage: usize,
    eval: &EvalConfig,
) -> Result<(Vec<f64>, Vec<Vec<Prediction>>)> {
    if stage >= spec.num_tasks() {
        return Err(Error::BadTaskIds(format!("stage {stage} is out of range 0..{}", spec.num_tasks())));
    }
    let tests: Vec<Vec<MultimodalSample>> = spec.tasks[..=stage]
        .iter()
        .map(|m| crate::benchmarks::load_samples(m, &m.test_path, false))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, &MultimodalSample)> =
        tests.iter().enumerate().flat_map(|(t, v)| v.iter().map(move |s| (t, s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let answers: Vec<Result<String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter().map(|(_, s)| predict(method, backbone, s, eval.max_new_tokens)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut predictions: Vec<Vec<Prediction>> = vec![Vec::new(); stage + 1];
    for ((t, sample), answer) in jobs.iter().zip(answers) {
        predictions[*t].push(Prediction { sample_id: sample.sample_id.clone(), prediction: answer? });
    }
    let mut row = Vec::with_capacity(stage + 1);
    for (t, manifest) in spec.tasks[..=stage].iter().enumerate() {
        let golds: BTreeMap<String, Vec<String>> =
            tests[t].iter().map(|s| (s.sample_id.clone(), vec![s.answer.clone()])).collect();
        row.push(score_task(&predictions[t], manifest, &golds, eval.containment)?);
    }
    Ok((row, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let (total, peak) = (100, 2e-4);
        let w = 3;
        assert_eq!(lr_at(0, total, peak, 0.03), 0.0);
        assert_eq!(lr_at(w, total, peak, 0.03), peak);
        assert!(lr_at(total, total, peak, 0.03).abs() < 1e-18);
        let mid = lr_at((total + w) / 2, total, peak, 0.03);
        assert!((lr_at(51, 99, peak, 0.03) - peak / 2.0).abs() < 1e-12);
        assert!(mid > 0.0 && mid < peak);
        assert_eq!(lr_at(0, 5, peak, 0.0), peak);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Param::new(Tensor::from_vec(1, 2, vec![1.0f64, -1.0]), ParamGroup::Adapter);
        p.grad = Tensor::from_vec(1, 2, vec![0.5, -2.0]);
        let mut opt = AdamW::new(0.0);
        opt.begin_step();
        opt.update(&mut p, 0.1);
        // The bias-corrected first step is lr · sign(g) up to eps.
        assert!((p.value.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.value.get(0, 1) + 0.9).abs() < 1e-6);
        let mut frozen = Param::new(Tensor::from_vec(1, 1, vec![1.0f64]), ParamGroup::Adapter);
        frozen.trainable = false;
        frozen.grad = Tensor::from_vec(1, 1, vec![1.0]);
        opt.update(&mut frozen, 0.1);
        assert_eq!(frozen.value.get(0, 0), 1.0);
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig { epochs: 2, grad_accum_steps: 2, ..Default::default() }.total_steps(5), 6);
    }
}
