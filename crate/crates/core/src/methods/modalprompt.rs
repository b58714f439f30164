//! Per-task soft prompts selected by image/text prototype similarity.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::routing::{modalprompt_select, sample_features, AnchorStore, SampleFeatures, TaskAnchor};
use super::{derived_rng, from_field, Method, MethodContext, ModalPromptConfig, Policy, SampleResolver, TaskInfo};
use crate::autograd::{Param, ParamGroup, Tape, Var};
use crate::backbone::{Backbone, Mode, MultimodalSample};
use crate::error::{Error, Result};
use crate::scalar::{normalized, Scalar};
use crate::tensor::Tensor;

/// Two-layer `tanh` MLP mapping a prompt summary into the feature space.
#[derive(Clone, Debug)]
pub struct TransformMlp<T> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
}

impl<T: Scalar> TransformMlp<T> {
    fn new(model_dim: usize, hidden: usize, feature_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w1: Param::new(Tensor::randn(hidden, model_dim, 1.0 / (model_dim as f64).sqrt(), rng), ParamGroup::Adapter),
            b1: Param::new(Tensor::zeros(1, hidden), ParamGroup::Adapter),
            w2: Param::new(Tensor::randn(feature_dim, hidden, 1.0 / (hidden as f64).sqrt(), rng), ParamGroup::Adapter),
        }
    }

    fn params(&self) -> [&Param<T>; 3] {
        [&self.w1, &self.b1, &self.w2]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 3] {
        [&mut self.w1, &mut self.b1, &mut self.w2]
    }
}

/// `1 − cos(MLP(mean prompt row), target)`.
pub fn alignment_loss<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    prompt: &'a Param<T>,
    mlp: &'a TransformMlp<T>,
    target: &[T],
) -> Var {
    let p = tape.param(prompt);
    let summary = tape.mean_rows(p);
    let w1 = tape.param(&mlp.w1);
    let b1 = tape.param(&mlp.b1);
    let w2 = tape.param(&mlp.w2);
    let h = tape.matmul_t(summary, w1);
    let h = tape.add(h, b1);
    let h = tape.tanh(h);
    let out = tape.matmul_t(h, w2);
    let t = tape.constant(Tensor::row_vector(target.to_vec()));
    let cos = tape.cosine(out, t);
    let neg = tape.scale(cos, -T::one());
    let one = tape.constant(Tensor::scalar(T::one()));
    tape.add(one, neg)
}

/// `normalize(m·p + (1−m)·batch_mean)`; the first observation initialises the prototype.
pub fn ema_prototype<T: Scalar>(prev: Option<&[T]>, batch_mean: &[T], momentum: T) -> Option<Vec<T>> {
    match prev {
        None => normalized(batch_mean),
        Some(p) => {
            let mixed: Vec<T> =
                p.iter().zip(batch_mean).map(|(&a, &b)| momentum * a + (T::one() - momentum) * b).collect();
            normalized(&mixed).or_else(|| Some(p.to_vec()))
        }
    }
}

fn mean_of<T: Scalar>(vs: impl Iterator<Item = Vec<T>>) -> Option<Vec<T>> {
    let mut acc: Option<Vec<T>> = None;
    let mut n = 0usize;
    for v in vs {
        n += 1;
        match &mut acc {
            None => acc = Some(v),
            Some(a) => a.iter_mut().zip(&v).for_each(|(x, &y)| *x += y),
        }
    }
    let nt = T::from_usize_lossy(n.max(1));
    acc.map(|mut a| {
        a.iter_mut().for_each(|x| *x /= nt);
        a
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct TaskPrototypeRecord {
    image: Option<Vec<f64>>,
    text: Option<Vec<f64>>,
}

pub struct ModalPrompt<T: Scalar> {
    name: String,
    config: ModalPromptConfig,
    prompts: Vec<Param<T>>,
    transforms: Vec<TransformMlp<T>>,
    image_protos: Vec<Option<Vec<T>>>,
    text_protos: Vec<Option<Vec<T>>>,
    learned: Vec<usize>,
    current: usize,
}

impl<T: Scalar> ModalPrompt<T> {
    pub fn new(ctx: &MethodContext<'_, T>) -> Result<Self> {
        let n = ctx.num_tasks.max(1);
        let cfg = ctx.config.modalprompt.clone();
        let bb = ctx.backbone.config();
        let mut rng = derived_rng(ctx.seed, 0x4d50_5254);
        let prompts = (0..n)
            .map(|_| Param::new(Tensor::randn(cfg.prefix_len, bb.model_dim, 0.1, &mut rng), ParamGroup::Adapter))
            .collect();
        let transforms =
            (0..n).map(|_| TransformMlp::new(bb.model_dim, cfg.transform_hidden, bb.feature_dim(), &mut rng)).collect();
        Ok(Self {
            name: ctx.name.to_owned(),
            config: cfg,
            prompts,
            transforms,
            image_protos: vec![None; n],
            text_protos: vec![None; n],
            learned: Vec::new(),
            current: 0,
        })
    }

    pub fn prompt(&self, task: usize) -> &Param<T> {
        &self.prompts[task]
    }

    pub fn transform(&self, task: usize) -> &TransformMlp<T> {
        &self.transforms[task]
    }

    pub fn text_prototype(&self, task: usize) -> Option<&[T]> {
        self.text_protos[task].as_deref()
    }

    pub fn image_prototype(&self, task: usize) -> Option<&[T]> {
        self.image_protos[task].as_deref()
    }

    fn learned_store(&self) -> AnchorStore<T> {
        let mut store = AnchorStore::default();
        for &t in &self.learned {
            let text = self.text_protos[t].clone().unwrap_or_default();
            store.push(TaskAnchor { image: self.image_protos[t].clone(), text });
        }
        store
    }

    /// Task ids whose prompts are prepended for this sample, in task order.
    pub fn select(&self, backbone: &Backbone<T>, sample: &MultimodalSample) -> Result<Vec<usize>> {
        let f = sample_features(backbone, sample)?;
        let picked = modalprompt_select(&f, &self.learned_store(), self.config.transfer_num, T::lit(self.config.lambda))?;
        let mut tasks: Vec<usize> = picked.into_iter().map(|i| self.learned[i]).collect();
        tasks.sort_unstable();
        Ok(tasks)
    }

    fn batch_features(backbone: &Backbone<T>, batch: &[MultimodalSample]) -> Result<Vec<SampleFeatures<T>>> {
        batch.iter().map(|s| sample_features(backbone, s)).collect()
    }

    fn set_trainable(&mut self, task: usize) {
        for (i, (p, m)) in self.prompts.iter_mut().zip(&mut self.transforms).enumerate() {
            p.trainable = i == task;
            for q in m.params_mut() {
                q.trainable = i == task;
            }
        }
    }
}

impl<T: Scalar> Method<T> for ModalPrompt<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_task_start(&mut self, _: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        if task.index >= self.prompts.len() {
            return Err(Error::InvalidConfig {
                field: "num_tasks",
                reason: format!("task {} exceeds the {} prompts", task.index, self.prompts.len()),
            });
        }
        self.current = task.index;
        self.set_trainable(task.index);
        Ok(())
    }

    fn policy<'a>(&'a self, backbone: &'a Backbone<T>, sample: &MultimodalSample, mode: Mode) -> Result<Policy<'a, T>> {
        let tasks = match mode {
            Mode::Train => vec![self.current],
            Mode::Eval if self.learned.is_empty() => return Ok(Policy::none()),
            Mode::Eval => self.select(backbone, sample)?,
        };
        Ok(Policy { overlay: None, prefix: tasks.into_iter().map(|t| &self.prompts[t]).collect() })
    }

    fn auxiliary_loss<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        backbone: &'a Backbone<T>,
        batch: &[MultimodalSample],
    ) -> Result<Option<Var>> {
        let feats = Self::batch_features(backbone, batch)?;
        let target = mean_of(feats.iter().filter_map(|f| f.image.clone()))
            .or_else(|| mean_of(feats.iter().map(|f| f.text.clone())));
        let Some(target) = target else { return Ok(None) };
        let t = self.current;
        Ok(Some(alignment_loss(tape, &self.prompts[t], &self.transforms[t], &target)))
    }

    fn observe_batch(&mut self, backbone: &Backbone<T>, batch: &[MultimodalSample]) -> Result<()> {
        let feats = Self::batch_features(backbone, batch)?;
        let m = T::lit(self.config.prototype_momentum);
        let t = self.current;
        if let Some(img) = mean_of(feats.iter().filter_map(|f| f.image.clone())) {
            if let Some(p) = ema_prototype(self.image_protos[t].as_deref(), &img, m) {
                self.image_protos[t] = Some(p);
            }
        }
        if let Some(txt) = mean_of(feats.iter().map(|f| f.text.clone())) {
            if let Some(p) = ema_prototype(self.text_protos[t].as_deref(), &txt, m) {
                self.text_protos[t] = Some(p);
            }
        }
        Ok(())
    }

    fn on_task_end(&mut self, backbone: &Backbone<T>, task: &TaskInfo<'_>) -> Result<()> {
        if task.train.is_empty() {
            return Err(Error::EmptyTask(task.name.to_owned()));
        }
        if self.text_protos[task.index].is_none() {
            self.observe_batch(backbone, task.train)?;
        }
        if !self.learned.contains(&task.index) {
            self.learned.push(task.index);
        }
        self.set_trainable(usize::MAX);
        Ok(())
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for (p, m) in self.prompts.iter().zip(&self.transforms) {
            f(p);
            m.params().into_iter().for_each(&mut *f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (p, m) in self.prompts.iter_mut().zip(&mut self.transforms) {
            f(p);
            m.params_mut().into_iter().for_each(&mut *f);
        }
    }

    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        let mut params = Vec::new();
        self.visit_params(&mut |p| params.push(p.value.to_f64_vec()));
        let conv = |v: &Option<Vec<T>>| v.as_ref().map(|v| v.iter().map(|x| x.to_f64_lossy()).collect());
        let protos: Vec<TaskPrototypeRecord> = self
            .image_protos
            .iter()
            .zip(&self.text_protos)
            .map(|(i, t)| TaskPrototypeRecord { image: conv(i), text: conv(t) })
            .collect();
        Ok(json!({ "params": params, "prototypes": protos, "learned": self.learned }))
    }

    fn load_state(&mut self, state: &serde_json::Value, _: &SampleResolver<'_>) -> Result<()> {
        let params: Vec<Vec<f64>> = from_field(state, "params")?;
        let mut it = params.into_iter();
        let mut err = None;
        self.visit_params_mut(&mut |p| match it.next() {
            Some(v) if v.len() == p.numel() => p.value = Tensor::from_f64(p.value.rows(), p.value.cols(), &v),
            _ => err = Some(Error::ConfigMismatch("prompt parameter shapes differ".into())),
        });
        if let Some(e) = err {
            return Err(e);
        }
        let protos: Vec<TaskPrototypeRecord> = from_field(state, "prototypes")?;
        if protos.len() != self.prompts.len() {
            return Err(Error::ConfigMismatch("prototype count differs".into()));
        }
        let conv = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v.iter().map(|&x| T::lit(x)).collect());
        self.image_protos = protos.iter().map(|p| conv(&p.image)).collect();
        self.text_protos = protos.iter().map(|p| conv(&p.text)).collect();
        self.learned = from_field(state, "learned")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_step_matches_closed_form() {
        let p = [0.6, 0.8];
        let m = [2.0, 0.0];
        let got = ema_prototype(Some(&p[..]), &m, 0.9).unwrap();
        let raw: [f64; 2] = [0.9 * 0.6 + 0.1 * 2.0, 0.9 * 0.8];
        let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        assert!((got[0] - raw[0] / n).abs() < 1e-15 && (got[1] - raw[1] / n).abs() < 1e-15);
        assert_eq!(ema_prototype(None, &[0.0, 3.0], 0.9).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn parallel_output_gives_zero_loss() {
        let mut rng = derived_rng(0, 1);
        let mlp = TransformMlp::<f64>::new(4, 3, 2, &mut rng);
        let prompt = Param::new(Tensor::randn(2, 4, 1.0, &mut rng), ParamGroup::Adapter);
        let mut tape = Tape::new();
        let p = tape.param(&prompt);
        let s = tape.mean_rows(p);
        let w1 = tape.param(&mlp.w1);
        let h = tape.matmul_t(s, w1);
        let h = tape.tanh(h);
        let w2 = tape.param(&mlp.w2);
        let out = tape.matmul_t(h, w2);
        let target: Vec<f64> = tape.value(out).data().iter().map(|x| 3.0 * x).collect();
        let mut tape = Tape::new();
        let loss = alignment_loss(&mut tape, &prompt, &mlp, &target);
        assert!(tape.value(loss).get(0, 0).abs() < 1e-12);
    }
}
