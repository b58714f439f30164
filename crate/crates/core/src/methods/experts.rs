//! Methods with one adapter expert per task: HiDe, DISCO and SAME.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::routing::{
    disco_adjust_rank, disco_mask, hide_extract_anchors, hide_predict_task, sample_features, AnchorRecord,
    AnchorStore,
};
use super::spectral::{importance, project_out, protected_basis, same_update_anchors};
use super::{from_field, Method, MethodContext, Policy, SameConfig, SampleResolver, StaticMix, TaskInfo};
use crate::autograd::Param;
use crate::backbone::{Backbone, Mode, MultimodalSample, PointName};
use crate::error::{Error, Result};
use crate::peft::{trainable_param_count, AdapterBank, BankRecord, ExpertMix, LoraConfig};
use crate::scalar::Scalar;

/// Adapter bank with one expert per task and the bookkeeping of which
/// experts have been learned.
struct TaskExperts<T: Scalar> {
    bank: AdapterBank<T>,
    num_tasks: usize,
    current: usize,
    /// Expert indices of completed tasks, in completion order.
    learned: Vec<usize>,
}

impl<T: Scalar> TaskExperts<T> {
    fn new(ctx: &MethodContext<'_, T>, cfg: LoraConfig) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        Ok(Self { bank: AdapterBank::inject(ctx.backbone, &cfg, n, ctx.seed)?, num_tasks: n, current: 0, learned: Vec::new() })
    }

    fn start(&mut self, task: &TaskInfo<'_>) -> Result<()> {
        if task.index >= self.num_tasks {
            return Err(Error::InvalidConfig {
                field: "num_tasks",
                reason: format!("task {} exceeds the {} experts", task.index, self.num_tasks),
            });
        }
        self.current = task.index;
        for e in 0..self.num_tasks {
            self.bank.set_expert_trainable(e, e == task.index);
        }
        Ok(())
    }

    fn finish(&mut self, task: &TaskInfo<'_>) {
        if !self.learned.contains(&task.index) {
            self.learned.push(task.index);
        }
        self.bank.set_expert_trainable(task.index, false);
    }

    fn save(&self) -> serde_json::Value {
        json!({ "bank": self.bank.to_record(), "learned": self.learned })
    }

    fn load(&mut self, state: &serde_json::Value) -> Result<()> {
        self.bank.load_record(&from_field::<BankRecord>(state, "bank")?)?;
        self.learned = from_field(state, "learned")?;
        if self.learned.iter().any(|&t| t >= self.num_tasks) {
            return Err(Error::ConfigMismatch("learned task index out of range".into()));
        }
        Ok(())
    }
}

fn task_features<T: Scalar>(
    backbone: &Backbone<T>,
    samples: &[MultimodalSample],
) -> Result<Vec<super::routing::SampleFeatures<T>>> {
    samples.iter().map(|s| sample_features(backbone, s)).collect()
}

/// Per-task experts on every point; the task is inferred from image and
/// text anchors, and only the final block routes to the predicted expert.
pub struct Hide<T: Scalar> {
    name: String,
    experts: TaskExperts<T>,
    anchors: AnchorStore<T>,
    image_weight: T,
}

impl<T: Scalar> Hide<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        let lora = &ctx.config.lora;
        let cfg = LoraConfig { r: lora.r * n, ..lora.to_config(&PointName::ALL) };
        Ok(Self {
            name: ctx.name.to_owned(),
            experts: TaskExperts::new(ctx, cfg)?,
            anchors: AnchorStore::default(),
            image_weight: T::lit(ctx.config.hide.image_weight),
        })
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.experts.bank
    }

    pub fn anchors(&self) -> &AnchorStore<T> {
        &self.anchors
    }

    /// Expert index predicted for a sample.
    pub fn predict(&self, backbone: &Backbone<T>, sample: &MultimodalSample) -> Result<usize> {
        let f = sample_features(backbone, sample)?;
        Ok(self.experts.learned[hide_predict_task(&f, &self.anchors, self.image_weight)?])
    }
}

impl<T: Scalar> Method<T> for Hide<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        self.experts.start(task)
    }

    fn policy<'a>(&'a self, backbone: &'a Backbone<T>, sample: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>> {
        let bank = &self.experts.bank;
        let overlay = match mode {
            Mode::Train => StaticMix { bank, mix: ExpertMix::Sum(vec![self.experts.current]), last_layer: None },
            Mode::Eval => {
                if self.experts.learned.is_empty() {
                    return Ok(Policy::none());
                }
                let predicted = self.predict(backbone, sample)?;
                StaticMix {
                    bank,
                    mix: ExpertMix::Sum(self.experts.learned.clone()),
                    last_layer: Some(ExpertMix::Sum(vec![predicted])),
                }
            }
        };
        Ok(Policy { overlay: Some(Box::new(overlay)), prefix: Vec::new() })
    }

    fn on_task_end(&mut self, backbone: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        let anchor = hide_extract_anchors(task.name, &task_features(backbone, task.train)?)?;
        if !self.experts.learned.contains(&task.index) {
            self.anchors.push(anchor);
        }
        self.experts.finish(task);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.experts.bank.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.experts.bank.visit_params_mut(f);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.experts.bank)
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        let mut v = self.experts.save();
        v["anchors"] = json!(self.anchors.to_records());
        Ok(v)
    }

    fn load_state(&mut self, state: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        self.experts.load(state)?;
        self.anchors = AnchorStore::from_records(&from_field::<Vec<AnchorRecord>>(state, "anchors")?);
        Ok(())
    }
}

/// Per-task FFN experts aggregated by prototype-similarity weights.
pub struct Disco<T: Scalar> {
    name: String,
    experts: TaskExperts<T>,
    prototypes: AnchorStore<T>,
    tau: T,
    adjusted_r: usize,
}

impl<T: Scalar> Disco<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        let (adjusted_r, alpha) = disco_adjust_rank(ctx.config.lora.r, n)?;
        let cfg = LoraConfig { r: adjusted_r, alpha, ..ctx.config.lora.to_config(&PointName::FFN) };
        Ok(Self {
            name: ctx.name.to_owned(),
            experts: TaskExperts::new(ctx, cfg)?,
            prototypes: AnchorStore::default(),
            tau: T::lit(ctx.config.disco.tau),
            adjusted_r,
        })
    }

    pub fn adjusted_r(&self) -> usize {
        self.adjusted_r
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.experts.bank
    }

    /// Expert weights for a sample, indexed like the learned tasks.
    pub fn weights(&self, backbone: &Backbone<T>, sample: &MultimodalSample) -> Result<Vec<(usize, T)>> {
        let f = sample_features(backbone, sample)?;
        let w = disco_mask(&f, &self.prototypes, self.tau)?;
        Ok(self.experts.learned.iter().copied().zip(w).collect())
    }
}

impl<T: Scalar> Method<T> for Disco<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        self.experts.start(task)
    }

    fn policy<'a>(&'a self, backbone: &'a Backbone<T>, sample: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>> {
        let bank = &self.experts.bank;
        let mix = match mode {
            Mode::Train => ExpertMix::Fixed(vec![(self.experts.current, T::one())]),
            Mode::Eval => {
                if self.experts.learned.is_empty() {
                    return Ok(Policy::none());
                }
                ExpertMix::Fixed(self.weights(backbone, sample)?)
            }
        };
        Ok(Policy { overlay: Some(Box::new(StaticMix { bank, mix, last_layer: None })), prefix: Vec::new() })
    }

    fn on_task_end(&mut self, backbone: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        let proto = hide_extract_anchors(task.name, &task_features(backbone, task.train)?)?;
        if !self.experts.learned.contains(&task.index) {
            self.prototypes.push(proto);
        }
        self.experts.finish(task);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.experts.bank.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.experts.bank.visit_params_mut(f);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.experts.bank)
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        let mut v = self.experts.save();
        v["prototypes"] = json!(self.prototypes.to_records());
        Ok(v)
    }

    fn load_state(&mut self, state: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        self.experts.load(state)?;
        self.prototypes = AnchorStore::from_records(&from_field::<Vec<AnchorRecord>>(state, "prototypes")?);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PointAnchorRecord {
    layer_index: usize,
    point_name: PointName,
    directions: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct PointAnchors<T> {
    directions: Vec<Vec<T>>,
    scores: Vec<T>,
    /// Orthonormal basis of the protected directions.
    basis: Vec<Vec<T>>,
}

/// Per-task FFN experts whose gradients are kept out of the spectral
/// anchors of earlier tasks.
pub struct Same<T: Scalar> {
    name: String,
    experts: TaskExperts<T>,
    config: SameConfig,
    anchors: BTreeMap<(usize, PointName), PointAnchors<T>>,
    windows: BTreeMap<(usize, PointName), VecDeque<Vec<T>>>,
    gradients: BTreeMap<(usize, PointName), Vec<Vec<T>>>,
    snapshot_every: usize,
}

impl<T: Scalar> Same<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        let lora = &ctx.config.lora;
        let cfg = LoraConfig { r: lora.r * n, ..lora.to_config(&PointName::FFN) };
        Ok(Self {
            name: ctx.name.to_owned(),
            experts: TaskExperts::new(ctx, cfg)?,
            config: ctx.config.same.clone(),
            anchors: BTreeMap::new(),
            windows: BTreeMap::new(),
            gradients: BTreeMap::new(),
            snapshot_every: 1,
        })
    }

    pub fn bank(&self) -> &AdapterBank<T> {
        &self.experts.bank
    }

    /// Stored anchor directions at one point, across all completed tasks.
    pub fn anchors_at(&self, layer: usize, name: PointName) -> &[Vec<T>] {
        self.anchors.get(&(layer, name)).map_or(&[], |a| &a.directions)
    }

    pub fn protected_at(&self, layer: usize, name: PointName) -> &[Vec<T>] {
        self.anchors.get(&(layer, name)).map_or(&[], |a| &a.basis)
    }

    fn active_experts(&self, mode: Mode) -> Vec<usize> {
        let mut ids = self.experts.learned.clone();
        if mode == Mode::Train && !ids.contains(&self.experts.current) {
            ids.push(self.experts.current);
        }
        ids
    }
}

impl<T: Scalar> Method<T> for Same<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        self.experts.start(task)?;
        self.snapshot_every = (task.total_steps / self.config.window_size).max(1);
        self.windows.clear();
        self.gradients.clear();
        Ok(())
    }

    fn policy<'a>(&'a self, _: &'a Backbone<T>, _: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>> {
        let ids = self.active_experts(mode);
        if ids.is_empty() {
            return Ok(Policy::none());
        }
        let overlay = StaticMix { bank: &self.experts.bank, mix: ExpertMix::Sum(ids), last_layer: None };
        Ok(Policy { overlay: Some(Box::new(overlay)), prefix: Vec::new() })
    }

    fn before_optimizer_step(&mut self, _step: usize) -> Result<()> {
        let current = self.experts.current;
        for pa in self.experts.bank.points_mut() {
            let key = pa.point.key();
            let expert = &mut pa.experts[current];
            let g = expert.flat_grad();
            if let Some(a) = self.anchors.get(&key) {
                if !a.basis.is_empty() {
                    expert.set_flat_grad(&project_out(&g, &a.basis));
                }
            }
            self.gradients.entry(key).or_default().push(g);
        }
        Ok(())
    }

    fn after_optimizer_step(&mut self, step: usize) -> Result<()> {
        if (step + 1) % self.snapshot_every != 0 {
            return Ok(());
        }
        let current = self.experts.current;
        for pa in self.experts.bank.points() {
            let window = self.windows.entry(pa.point.key()).or_default();
            window.push_back(pa.experts[current].flatten());
            while window.len() > self.config.window_size {
                window.pop_front();
            }
        }
        Ok(())
    }

    fn on_task_end(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        let mu = T::lit(self.config.mu);
        let tau = T::lit(self.config.tau_score);
        for (key, window) in &self.windows {
            let snaps: Vec<Vec<T>> = window.iter().cloned().collect();
            let found = same_update_anchors(&snaps, &self.config);
            let grads = self.gradients.get(key).map_or(&[][..], |g| &g[..]);
            let entry = self.anchors.entry(*key).or_default();
            for d in found.directions {
                entry.scores.push(importance(grads, &d, mu));
                entry.directions.push(d);
            }
            entry.basis = protected_basis(&entry.directions, &entry.scores, tau);
        }
        self.windows.clear();
        self.gradients.clear();
        self.experts.finish(task);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.experts.bank.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.experts.bank.visit_params_mut(f);
    }

    fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.experts.bank)
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        let conv = |v: &Vec<T>| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let anchors: Vec<PointAnchorRecord> = self
            .anchors
            .iter()
            .map(|(&(layer, name), a)| PointAnchorRecord {
                layer_index: layer,
                point_name: name,
                directions: a.directions.iter().map(conv).collect(),
                scores: a.scores.iter().map(|s| s.to_f64_lossy()).collect(),
            })
            .collect();
        let mut v = self.experts.save();
        v["anchors"] = json!(anchors);
        Ok(v)
    }

    fn load_state(&mut self, state: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        self.experts.load(state)?;
        let records: Vec<PointAnchorRecord> = from_field(state, "anchors")?;
        let tau = T::lit(self.config.tau_score);
        self.anchors.clear();
        for r in records {
            let directions: Vec<Vec<T>> =
                r.directions.iter().map(|d| d.iter().map(|&x| T::lit(x)).collect()).collect();
            let scores: Vec<T> = r.scores.iter().map(|&x| T::lit(x)).collect();
            let basis = protected_basis(&directions, &scores, tau);
            self.anchors.insert((r.layer_index, r.point_name), PointAnchors { directions, scores, basis });
        }
        Ok(())
    }
}
