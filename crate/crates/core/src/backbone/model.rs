use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, ByteTokenizer, InjectionPoint, MultimodalSample, PointName};
use crate::autograd::{Param, ParamGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-sample context handed to an [`Overlay`] at every injection point.
pub struct OverlayCtx<'r> {
    pub mode: Mode,
    /// `1 × model_dim` mean of the instruction token embeddings.
    pub pooled_instruction: Var,
    pub num_layers: usize,
    /// Present only in training mode with dropout enabled.
    pub dropout: Option<&'r mut ChaCha8Rng>,
}

/// Additive modification of an injection point's output. `x` is the input
/// to the base linear map (`n × in_dim`); the returned delta is `n × out_dim`.
pub trait Overlay<'a, T: Scalar> {
    fn delta(
        &self,
        tape: &mut Tape<'a, T>,
        point: InjectionPoint,
        x: Var,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Option<Var>>;
}

/// Position layout `[prefix][visual][instruction][sep][answer]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prefix_len: usize,
    pub visual_len: usize,
    pub instruction_len: usize,
    pub answer_len: usize,
}

impl SequenceLayout {
    pub fn sep_position(&self) -> usize {
        self.prefix_len + self.visual_len + self.instruction_len
    }

    pub fn total(&self) -> usize {
        self.sep_position() + 1 + self.answer_len
    }

    /// Positions whose next-token prediction contributes to the loss: the
    /// separator and every answer token (the last one predicts end-of-sequence).
    pub fn loss_positions(&self) -> Range<usize> {
        let sep = self.sep_position();
        sep..sep + self.answer_len + 1
    }
}

pub struct SampleForward {
    /// Sum of cross-entropy over answer positions (`1 × 1`).
    pub loss_sum: Var,
    pub num_targets: usize,
    pub logits: Var,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Logits for every position of every sample.
    pub logits: Vec<Tensor<T>>,
    /// Mean next-token cross-entropy over answer positions of the batch.
    pub loss: T,
}

#[derive(Clone)]
struct Layer<T> {
    weights: [Tensor<T>; 7],
}

#[derive(Clone)]
pub struct Backbone<T: Scalar> {
    config: BackboneConfig,
    tokenizer: ByteTokenizer,
    embedding: Tensor<T>,
    positions: Tensor<T>,
    layers: Vec<Layer<T>>,
    head: Tensor<T>,
    extractor: Tensor<T>,
    text_projection: Tensor<T>,
    projector_weight: Param<T>,
    projector_bias: Param<T>,
}

fn point_index(name: PointName) -> usize {
    PointName::ALL.iter().position(|&p| p == name).expect("known point")
}

fn sinusoidal<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

impl<T: Scalar> Backbone<T> {
    /// Builds all weights deterministically from `config.seed`.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tokenizer = ByteTokenizer::new(config.vocab_size);
        let (d, f) = (config.model_dim, config.feature_dim());
        let embedding = Tensor::randn(tokenizer.total_vocab(), d, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|layer| {
                let weights = PointName::ALL.map(|name| {
                    let p = config.point(layer, name);
                    Tensor::randn(p.out_dim, p.in_dim, 1.0 / (p.in_dim as f64).sqrt(), &mut rng)
                });
                Layer { weights }
            })
            .collect();
        let head = Tensor::randn(tokenizer.total_vocab(), d, 1.0 / (d as f64).sqrt(), &mut rng);
        let extractor =
            Tensor::randn(f, config.image_feature_dim, 1.0 / (config.image_feature_dim as f64).sqrt(), &mut rng);
        let text_projection = Tensor::randn(f, 256, 1.0, &mut rng);
        let v = config.num_visual_tokens;
        let projector_weight =
            Param::new(Tensor::randn(v * d, f, 1.0 / (f as f64).sqrt(), &mut rng), ParamGroup::Projector);
        let projector_bias = Param::new(Tensor::zeros(1, v * d), ParamGroup::Projector);
        let positions = sinusoidal(config.max_seq_len, d);
        Ok(Self {
            config,
            tokenizer,
            embedding,
            positions,
            layers,
            head,
            extractor,
            text_projection,
            projector_weight,
            projector_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        self.tokenizer
    }

    pub fn injection_points(&self) -> Vec<InjectionPoint> {
        self.config.injection_points()
    }

    pub fn point(&self, layer: usize, name: PointName) -> InjectionPoint {
        self.config.point(layer, name)
    }

    /// Frozen base weight (`out_dim × in_dim`) of an injection point.
    pub fn base_weight(&self, layer: usize, name: PointName) -> &Tensor<T> {
        &self.layers[layer].weights[point_index(name)]
    }

    /// Mutable base weight, for folding adapters into the backbone.
    pub fn base_weight_mut(&mut self, layer: usize, name: PointName) -> &mut Tensor<T> {
        &mut self.layers[layer].weights[point_index(name)]
    }

    /// Every frozen tensor, in a fixed order. Used for snapshot comparisons.
    pub fn frozen_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding, &self.head, &self.extractor, &self.text_projection];
        for layer in &self.layers {
            out.extend(layer.weights.iter());
        }
        out
    }

    pub fn projector_params(&self) -> [&Param<T>; 2] {
        [&self.projector_weight, &self.projector_bias]
    }

    pub fn projector_params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.projector_weight, &mut self.projector_bias]
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.image_feature_dim {
            return Err(Error::DimensionMismatch {
                context: "image features",
                expected: self.config.image_feature_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::data(None, "image features must be finite"));
        }
        Ok(())
    }

    /// Frozen extractor output `tanh(E·x)`: the image routing feature.
    pub fn image_features(&self, features: &[f64]) -> Result<Vec<T>> {
        self.check_features(features)?;
        let x = Tensor::from_f64(1, features.len(), features);
        Ok(x.matmul_t(&self.extractor).map(|v| v.tanh()).into_vec())
    }

    /// Frozen projection of the instruction's normalised byte histogram.
    pub fn text_features(&self, instruction: &str) -> Vec<T> {
        let mut hist = vec![T::zero(); 256];
        for b in instruction.bytes() {
            hist[b as usize] += T::one();
        }
        let norm = crate::scalar::norm(&hist);
        if norm > T::zero() {
            hist.iter_mut().for_each(|h| *h /= norm);
        }
        Tensor::row_vector(hist).matmul_t(&self.text_projection).into_vec()
    }

    /// Visual token embeddings (`num_visual_tokens × model_dim`) for a raw feature vector.
    pub fn encode_image(&self, features: &[f64]) -> Result<Tensor<T>> {
        let z = self.image_features(features)?;
        let v = self.config.num_visual_tokens;
        let out = Tensor::row_vector(z)
            .matmul_t(&self.projector_weight.value)
            .add(&self.projector_bias.value)
            .reshaped(v, self.config.model_dim);
        Ok(out)
    }

    pub fn layout(&self, sample: &MultimodalSample, prefix_len: usize, answer_len: usize) -> Result<SequenceLayout> {
        let layout = SequenceLayout {
            prefix_len,
            visual_len: if sample.image_features.is_some() { self.config.num_visual_tokens } else { 0 },
            instruction_len: sample.instruction.len(),
            answer_len,
        };
        if layout.total() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                sample_id: sample.sample_id.clone(),
                len: layout.total(),
                max: self.config.max_seq_len,
            });
        }
        Ok(layout)
    }

    fn embed_rows(&self, ids: &[usize]) -> Tensor<T> {
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.embedding.row(id));
        }
        Tensor::from_vec(ids.len(), d, data)
    }

    fn pooled_instruction(&self, instruction_ids: &[usize]) -> Tensor<T> {
        let d = self.config.model_dim;
        let mut pooled = Tensor::zeros(1, d);
        if instruction_ids.is_empty() {
            return pooled;
        }
        for &id in instruction_ids {
            for (o, &x) in pooled.data_mut().iter_mut().zip(self.embedding.row(id)) {
                *o += x;
            }
        }
        let n = T::from_usize_lossy(instruction_ids.len());
        pooled.data_mut().iter_mut().for_each(|x| *x /= n);
        pooled
    }

    /// Runs the transformer over `[prefix][visual][instruction][sep][answer_inputs]`
    /// and returns the final hidden states together with the layout.
    #[allow(clippy::too_many_arguments)]
    fn hidden<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sample: &MultimodalSample,
        answer_inputs: &[usize],
        overlay: Option<&dyn Overlay<'a, T>>,
        prefix: Option<Var>,
        mode: Mode,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, SequenceLayout)> {
        let prefix_len = prefix.map(|p| tape.value(p).rows()).unwrap_or(0);
        if let Some(p) = prefix {
            let cols = tape.value(p).cols();
            if cols != self.config.model_dim {
                return Err(Error::DimensionMismatch { context: "prompt prefix", expected: self.config.model_dim, got: cols });
            }
        }
        let layout = self.layout(sample, prefix_len, answer_inputs.len())?;
        let instruction_ids = self.tokenizer.tokenize(&sample.instruction);

        let mut parts = Vec::with_capacity(3);
        if let Some(p) = prefix {
            parts.push(p);
        }
        if let Some(features) = &sample.image_features {
            let z = self.image_features(features)?;
            let z = tape.constant(Tensor::row_vector(z));
            let w = tape.param(&self.projector_weight);
            let b = tape.param(&self.projector_bias);
            let flat = tape.matmul_t(z, w);
            let flat = tape.add(flat, b);
            parts.push(tape.reshape(flat, self.config.num_visual_tokens, self.config.model_dim));
        }
        let mut text_ids = instruction_ids.clone();
        text_ids.push(self.tokenizer.sep());
        text_ids.extend_from_slice(answer_inputs);
        parts.push(tape.constant(self.embed_rows(&text_ids)));
        let x = tape.concat_rows(&parts);

        let n = layout.total();
        let d = self.config.model_dim;
        let pos = Tensor::from_vec(n, d, self.positions.data()[..n * d].to_vec());
        let pos = tape.constant(pos);
        let mut x = tape.add(x, pos);

        let pooled = tape.constant(self.pooled_instruction(&instruction_ids));
        let mut ctx = OverlayCtx { mode, pooled_instruction: pooled, num_layers: self.config.num_layers, dropout };

        for layer in 0..self.config.num_layers {
            let n1 = tape.rms_norm(x);
            let q = self.linear(tape, layer, PointName::QProj, n1, overlay, &mut ctx)?;
            let k = self.linear(tape, layer, PointName::KProj, n1, overlay, &mut ctx)?;
            let v = self.linear(tape, layer, PointName::VProj, n1, overlay, &mut ctx)?;
            let att = tape.causal_attention(q, k, v, self.config.num_heads);
            let o = self.linear(tape, layer, PointName::OProj, att, overlay, &mut ctx)?;
            x = tape.add(x, o);
            let n2 = tape.rms_norm(x);
            let gate = self.linear(tape, layer, PointName::GateProj, n2, overlay, &mut ctx)?;
            let up = self.linear(tape, layer, PointName::UpProj, n2, overlay, &mut ctx)?;
            let act = tape.silu(gate);
            let h = tape.mul(act, up);
            let down = self.linear(tape, layer, PointName::DownProj, h, overlay, &mut ctx)?;
            x = tape.add(x, down);
        }
        Ok((x, layout))
    }

    fn linear<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        layer: usize,
        name: PointName,
        x: Var,
        overlay: Option<&dyn Overlay<'a, T>>,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Var> {
        let w = tape.constant_ref(self.base_weight(layer, name));
        let y = tape.matmul_t(x, w);
        if let Some(ov) = overlay {
            if let Some(delta) = ov.delta(tape, self.point(layer, name), x, ctx)? {
                return Ok(tape.add(y, delta));
            }
        }
        Ok(y)
    }

    fn logits<'a>(&'a self, tape: &mut Tape<'a, T>, hidden: Var) -> Var {
        let normed = tape.rms_norm(hidden);
        let head = tape.constant_ref(&self.head);
        tape.matmul_t(normed, head)
    }

    /// Teacher-forced forward of one training sample. The loss covers only
    /// the answer span; `full_logits` additionally returns logits for every position.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_sample<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sample: &MultimodalSample,
        overlay: Option<&dyn Overlay<'a, T>>,
        prefix: Option<Var>,
        mode: Mode,
        dropout: Option<&mut ChaCha8Rng>,
        full_logits: bool,
    ) -> Result<SampleForward> {
        let answer = self.tokenizer.tokenize(&sample.answer);
        let (hidden, layout) = self.hidden(tape, sample, &answer, overlay, prefix, mode, dropout)?;
        let span = layout.loss_positions();
        let mut targets = answer;
        targets.push(self.tokenizer.eos());
        let (logits, answer_logits) = if full_logits {
            let all = self.logits(tape, hidden);
            let ans = tape.slice_rows(all, span.start, span.end);
            (all, ans)
        } else {
            let rows = tape.slice_rows(hidden, span.start, span.end);
            let ans = self.logits(tape, rows);
            (ans, ans)
        };
        let loss_sum = tape.cross_entropy_sum(answer_logits, &targets);
        Ok(SampleForward { loss_sum, num_targets: targets.len(), logits, layout })
    }

    /// Eval-mode forward over a batch with one shared overlay and prefix.
    pub fn forward<'a>(
        &'a self,
        batch: &[MultimodalSample],
        overlay: Option<&dyn Overlay<'a, T>>,
        prefix: Option<&'a Tensor<T>>,
    ) -> Result<ForwardOutput<T>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for sample in batch {
            let mut tape = Tape::new();
            let p = prefix.map(|t| tape.constant_ref(t));
            let out = self.forward_sample(&mut tape, sample, overlay, p, Mode::Eval, None, true)?;
            total += tape.value(out.loss_sum).get(0, 0);
            count += out.num_targets;
            logits.push(tape.value(out.logits).clone());
        }
        Ok(ForwardOutput { logits, loss: total / T::from_usize_lossy(count) })
    }

    /// Greedy decoding; ties resolve toward the lowest token id.
    pub fn generate<'a>(
        &'a self,
        sample: &MultimodalSample,
        overlay: Option<&dyn Overlay<'a, T>>,
        prefix: Option<&Tensor<T>>,
        max_new_tokens: usize,
    ) -> Result<String> {
        if max_new_tokens == 0 {
            return Err(Error::InvalidConfig { field: "max_new_tokens", reason: "must be at least 1".into() });
        }
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..max_new_tokens {
            let mut tape = Tape::new();
            let p = prefix.map(|t| tape.constant(t.clone()));
            let (hidden, layout) = self.hidden(&mut tape, sample, &generated, overlay, p, Mode::Eval, None)?;
            let last = layout.total() - 1;
            let row = tape.slice_rows(hidden, last, last + 1);
            let logits = self.logits(&mut tape, row);
            let next = argmax(tape.value(logits).data()).expect("nonempty vocabulary");
            if next == self.tokenizer.eos() {
                break;
            }
            generated.push(next);
        }
        Ok(self.tokenizer.detokenize(&generated))
    }
}
