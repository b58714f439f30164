//! Low-rank adapters attachable to any injection point of the backbone.
//!
//! Every method shares this interface: an [`AdapterBank`] maps each targeted
//! `(layer, point)` to one or more experts of rank `r / experts_per_point`,
//! scaled by `alpha / r_effective`. Banks start as an exact identity
//! overlay because every `B` factor is zero-initialised.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, ParamGroup, Tape, Var};
use crate::backbone::{Backbone, InjectionPoint, Overlay, OverlayCtx, PointName};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub targets: BTreeSet<PointName>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { r: 8, alpha: 16.0, dropout_p: 0.05, targets: PointName::ALL.into_iter().collect() }
    }
}

impl LoraConfig {
    pub fn with_targets(mut self, targets: &[PointName]) -> Self {
        self.targets = targets.iter().copied().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidConfig { field: "lora.r", reason: "rank must be positive".into() });
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig { field: "lora.alpha", reason: "must be finite and positive".into() });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig { field: "lora.dropout", reason: "must lie in [0, 1)".into() });
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig { field: "lora.targets", reason: "at least one target".into() });
        }
        Ok(())
    }
}

/// Rank of each expert when `r` is split evenly over `experts`.
pub fn per_expert_rank(r: usize, experts: usize) -> Result<usize> {
    if experts == 0 || r % experts != 0 || r / experts == 0 {
        return Err(Error::RankNotDivisible { r, experts });
    }
    Ok(r / experts)
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    /// `r × in_dim`
    pub a: Param<T>,
    /// `out_dim × r`
    pub b: Param<T>,
    pub point: InjectionPoint,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new<R: Rng + ?Sized>(point: InjectionPoint, rank: usize, rng: &mut R) -> Self {
        let a = Tensor::randn(rank, point.in_dim, 1.0 / (point.in_dim as f64).sqrt(), rng);
        Self {
            a: Param::new(a, ParamGroup::Adapter),
            b: Param::new(Tensor::zeros(point.out_dim, rank), ParamGroup::Adapter),
            point,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.rows()
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.point.in_dim + self.point.out_dim)
    }

    /// `scale · B·A`, the dense update this adapter represents.
    pub fn dense_delta(&self, scale: T) -> Tensor<T> {
        self.b.value.matmul(&self.a.value).scaled(scale)
    }

    /// `(A, B)` flattened into one vector.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.a.value.data().to_vec();
        v.extend_from_slice(self.b.value.data());
        v
    }

    pub fn flat_grad(&self) -> Vec<T> {
        let mut v = self.a.grad.data().to_vec();
        v.extend_from_slice(self.b.grad.data());
        v
    }

    pub fn set_flat_grad(&mut self, g: &[T]) {
        let na = self.a.grad.len();
        self.a.grad.data_mut().copy_from_slice(&g[..na]);
        self.b.grad.data_mut().copy_from_slice(&g[na..]);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.a.trainable = trainable;
        self.b.trainable = trainable;
    }

    /// Tape form of `scale · (dropout(x) · Aᵀ) · Bᵀ`; `x` may already carry dropout.
    pub fn delta_var<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, scale: T) -> Var {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let h = tape.matmul_t(x, a);
        let y = tape.matmul_t(h, b);
        tape.scale(y, scale)
    }
}

/// Additive low-rank correction for a single input vector.
pub fn adapter_delta<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    adapter: &LoraAdapter<T>,
    scale: T,
    training: Option<(f64, &mut R)>,
) -> Result<Vec<T>> {
    if x.len() != adapter.point.in_dim {
        return Err(Error::DimensionMismatch { context: "adapter input", expected: adapter.point.in_dim, got: x.len() });
    }
    let mut input = Tensor::row_vector(x.to_vec());
    if let Some((p, rng)) = training {
        apply_dropout(&mut input, p, rng);
    }
    let h = input.matmul_t(&adapter.a.value);
    Ok(h.matmul_t(&adapter.b.value).scaled(scale).into_vec())
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    Tensor::from_vec(rows, cols, data)
}

fn apply_dropout<T: Scalar, R: Rng + ?Sized>(x: &mut Tensor<T>, p: f64, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    let mask: Tensor<T> = dropout_mask(x.rows(), x.cols(), p, rng);
    for (v, &m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

/// `base_W + scale·B·A`.
pub fn merge<T: Scalar>(adapter: &LoraAdapter<T>, base: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (out, inp) = (adapter.point.out_dim, adapter.point.in_dim);
    if base.rows() != out {
        return Err(Error::DimensionMismatch { context: "merge rows", expected: out, got: base.rows() });
    }
    if base.cols() != inp {
        return Err(Error::DimensionMismatch { context: "merge cols", expected: inp, got: base.cols() });
    }
    Ok(base.add(&adapter.dense_delta(scale)))
}

/// Copy of `backbone` with every expert of `bank` folded into the base weights.
pub fn merge_bank<T: Scalar>(backbone: &Backbone<T>, bank: &AdapterBank<T>) -> Result<Backbone<T>> {
    let mut merged = backbone.clone();
    for pa in bank.points() {
        let (layer, name) = pa.point.key();
        for expert in &pa.experts {
            let w = merge(expert, merged.base_weight(layer, name), pa.scale)?;
            *merged.base_weight_mut(layer, name) = w;
        }
    }
    Ok(merged)
}

/// How the experts of one injection point are combined for a forward pass.
#[derive(Clone, Debug)]
pub enum ExpertMix<T> {
    /// Sum of the listed experts' deltas.
    Sum(Vec<usize>),
    /// Constant per-expert weights.
    Fixed(Vec<(usize, T)>),
    /// Per-expert `1 × 1` weight variables (differentiable routing).
    Weighted(Vec<(usize, Var)>),
    /// `n × N` per-token weight matrix over all experts.
    PerToken(Var),
}

#[derive(Clone, Debug)]
pub struct PointAdapters<T> {
    pub point: InjectionPoint,
    pub experts: Vec<LoraAdapter<T>>,
    pub scale: T,
    /// Optional router weight (`num_experts × router_in`).
    pub router: Option<Param<T>>,
}

impl<T: Scalar> PointAdapters<T> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Combined delta for input `x` under `mix`.
    pub fn delta<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        mix: &ExpertMix<T>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Option<Var> {
        let x = match dropout {
            Some((p, rng)) if p > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let mask = tape.constant(dropout_mask(r, c, p, rng));
                tape.mul(x, mask)
            }
            _ => x,
        };
        let mut terms = Vec::new();
        match mix {
            ExpertMix::Sum(ids) => {
                for &i in ids {
                    terms.push(self.experts[i].delta_var(tape, x, self.scale));
                }
            }
            ExpertMix::Fixed(ws) => {
                for &(i, w) in ws {
                    if w == T::zero() {
                        continue;
                    }
                    terms.push(self.experts[i].delta_var(tape, x, self.scale * w));
                }
            }
            ExpertMix::Weighted(ws) => {
                for &(i, w) in ws {
                    let d = self.experts[i].delta_var(tape, x, self.scale);
                    terms.push(tape.mul_scalar(d, w));
                }
            }
            ExpertMix::PerToken(w) => {
                let n_exp = self.experts.len();
                for i in 0..n_exp {
                    let mut onehot = Tensor::zeros(n_exp, 1);
                    onehot.set(i, 0, T::one());
                    let e = tape.constant(onehot);
                    let col = tape.matmul(*w, e);
                    let d = self.experts[i].delta_var(tape, x, self.scale);
                    terms.push(tape.mul_column(d, col));
                }
            }
        }
        let mut it = terms.into_iter();
        let first = it.next()?;
        Some(it.fold(first, |acc, t| tape.add(acc, t)))
    }
}

/// Serialized adapter expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub layer_index: usize,
    pub point_name: PointName,
    pub expert_index: usize,
    pub rank: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterRecord {
    pub layer_index: usize,
    pub point_name: PointName,
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub adapters: Vec<AdapterRecord>,
    pub routers: Vec<RouterRecord>,
}

#[derive(Clone, Debug)]
pub struct AdapterBank<T> {
    points: BTreeMap<(usize, PointName), PointAdapters<T>>,
    dropout_p: f64,
}

impl<T: Scalar> AdapterBank<T> {
    pub fn empty() -> Self {
        Self { points: BTreeMap::new(), dropout_p: 0.0 }
    }

    /// Attaches `experts_per_point` adapters of rank `r / experts_per_point`
    /// to every targeted point of `backbone`. Base weights are untouched.
    pub fn inject(backbone: &Backbone<T>, config: &LoraConfig, experts_per_point: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let rank = per_expert_rank(config.r, experts_per_point)?;
        let scale = T::lit(config.alpha / rank as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = BTreeMap::new();
        for point in backbone.injection_points() {
            if !config.targets.contains(&point.name) {
                continue;
            }
            let experts = (0..experts_per_point).map(|_| LoraAdapter::new(point, rank, &mut rng)).collect();
            points.insert(point.key(), PointAdapters { point, experts, scale, router: None });
        }
        Ok(Self { points, dropout_p: config.dropout_p })
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn set_dropout_p(&mut self, p: f64) {
        self.dropout_p = p;
    }

    pub fn get(&self, layer: usize, name: PointName) -> Option<&PointAdapters<T>> {
        self.points.get(&(layer, name))
    }

    pub fn get_mut(&mut self, layer: usize, name: PointName) -> Option<&mut PointAdapters<T>> {
        self.points.get_mut(&(layer, name))
    }

    pub fn points(&self) -> impl Iterator<Item = &PointAdapters<T>> {
        self.points.values()
    }

    pub fn points_mut(&mut self) -> impl Iterator<Item = &mut PointAdapters<T>> {
        self.points.values_mut()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Adds a zero-initialised router of shape `experts × router_in(point)` to every point.
    pub fn attach_routers(&mut self, router_in: impl Fn(&InjectionPoint) -> usize) {
        for pa in self.points.values_mut() {
            let cols = router_in(&pa.point);
            pa.router = Some(Param::new(Tensor::zeros(pa.experts.len(), cols), ParamGroup::Adapter));
        }
    }

    /// Sets the trainable flag of one expert index at every point.
    pub fn set_expert_trainable(&mut self, expert: usize, trainable: bool) {
        for pa in self.points.values_mut() {
            if let Some(e) = pa.experts.get_mut(expert) {
                e.set_trainable(trainable);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for pa in self.points.values_mut() {
            for e in &mut pa.experts {
                f(&mut e.a);
                f(&mut e.b);
            }
            if let Some(r) = &mut pa.router {
                f(r);
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for pa in self.points.values() {
            for e in &pa.experts {
                f(&e.a);
                f(&e.b);
            }
            if let Some(r) = &pa.router {
                f(r);
            }
        }
    }

    pub fn to_record(&self) -> BankRecord {
        let mut rec = BankRecord::default();
        for pa in self.points.values() {
            for (i, e) in pa.experts.iter().enumerate() {
                rec.adapters.push(AdapterRecord {
                    layer_index: pa.point.layer,
                    point_name: pa.point.name,
                    expert_index: i,
                    rank: e.rank(),
                    a: e.a.value.to_f64_vec(),
                    b: e.b.value.to_f64_vec(),
                    scale: pa.scale.to_f64_lossy(),
                });
            }
            if let Some(r) = &pa.router {
                rec.routers.push(RouterRecord {
                    layer_index: pa.point.layer,
                    point_name: pa.point.name,
                    rows: r.value.rows(),
                    cols: r.value.cols(),
                    weight: r.value.to_f64_vec(),
                });
            }
        }
        rec
    }

    /// Overwrites parameter values from a record with the same structure.
    pub fn load_record(&mut self, rec: &BankRecord) -> Result<()> {
        let mismatch = |what: String| Error::ConfigMismatch(format!("adapter checkpoint: {what}"));
        for ar in &rec.adapters {
            let pa = self
                .points
                .get_mut(&(ar.layer_index, ar.point_name))
                .ok_or_else(|| mismatch(format!("no point {}.{}", ar.layer_index, ar.point_name)))?;
            let e = pa
                .experts
                .get_mut(ar.expert_index)
                .ok_or_else(|| mismatch(format!("no expert {}", ar.expert_index)))?;
            if e.rank() != ar.rank || e.a.value.len() != ar.a.len() || e.b.value.len() != ar.b.len() {
                return Err(mismatch(format!("shape differs at {}.{}", ar.layer_index, ar.point_name)));
            }
            e.a.value = Tensor::from_f64(e.a.value.rows(), e.a.value.cols(), &ar.a);
            e.b.value = Tensor::from_f64(e.b.value.rows(), e.b.value.cols(), &ar.b);
            pa.scale = T::lit(ar.scale);
        }
        for rr in &rec.routers {
            let pa = self
                .points
                .get_mut(&(rr.layer_index, rr.point_name))
                .ok_or_else(|| mismatch(format!("no router point {}.{}", rr.layer_index, rr.point_name)))?;
            let r = pa.router.as_mut().ok_or_else(|| mismatch("unexpected router".into()))?;
            if r.value.shape() != (rr.rows, rr.cols) {
                return Err(mismatch("router shape differs".into()));
            }
            r.value = Tensor::from_f64(rr.rows, rr.cols, &rr.weight);
        }
        Ok(())
    }
}

/// Exact number of trainable scalars: `Σ r_eff·(in+out)` plus routers.
pub fn trainable_param_count<T: Scalar>(bank: &AdapterBank<T>) -> usize {
    bank.points()
        .map(|pa| {
            pa.experts.iter().map(LoraAdapter::param_count).sum::<usize>()
                + pa.router.as_ref().map_or(0, Param::numel)
        })
        .sum()
}

/// A bank used directly as an overlay sums every expert at every point.
impl<'a, T: Scalar> Overlay<'a, T> for &'a AdapterBank<T> {
    fn delta(
        &self,
        tape: &mut Tape<'a, T>,
        point: InjectionPoint,
        x: Var,
        ctx: &mut OverlayCtx<'_>,
    ) -> Result<Option<Var>> {
        let bank: &'a AdapterBank<T> = self;
        let Some(pa) = bank.get(point.layer, point.name) else { return Ok(None) };
        let ids = (0..pa.num_experts()).collect();
        let dropout = ctx.dropout.as_deref_mut().map(|rng| (bank.dropout_p, rng));
        Ok(pa.delta(tape, x, &ExpertMix::Sum(ids), dropout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, MultimodalSample};

    fn point(in_dim: usize, out_dim: usize) -> InjectionPoint {
        InjectionPoint { layer: 0, name: PointName::QProj, in_dim, out_dim }
    }

    fn tiny_backbone() -> Backbone<f64> {
        Backbone::build(BackboneConfig {
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 64,
            image_feature_dim: 4,
            num_visual_tokens: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn hand_computed_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ad = LoraAdapter::<f64>::new(point(2, 2), 1, &mut rng);
        ad.a.value = Tensor::from_vec(1, 2, vec![1.0, 0.0]);
        ad.b.value = Tensor::from_vec(2, 1, vec![2.0, 0.0]);
        let scale = 2.0 / 1.0;
        let d = adapter_delta::<f64, ChaCha8Rng>(&[3.0, 5.0], &ad, scale, None).unwrap();
        assert_eq!(d, vec![12.0, 0.0]);
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ad = LoraAdapter::<f64>::new(point(5, 3), 2, &mut rng);
        let d = adapter_delta::<f64, ChaCha8Rng>(&[1.0, -2.0, 0.5, 3.0, 9.0], &ad, 4.0, None).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        assert!(matches!(
            adapter_delta::<f64, ChaCha8Rng>(&[1.0], &ad, 1.0, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eval_delta_is_deterministic_and_dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ad = LoraAdapter::<f64>::new(point(6, 6), 2, &mut rng);
        ad.b.value = Tensor::randn(6, 2, 1.0, &mut rng);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let e1 = adapter_delta::<f64, ChaCha8Rng>(&x, &ad, 1.0, None).unwrap();
        let e2 = adapter_delta::<f64, ChaCha8Rng>(&x, &ad, 1.0, None).unwrap();
        assert_eq!(e1, e2);
        let mut drng = ChaCha8Rng::seed_from_u64(11);
        let t = adapter_delta(&x, &ad, 1.0, Some((0.5, &mut drng))).unwrap();
        assert_ne!(t, e1);
    }

    #[test]
    fn doubling_alpha_doubles_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ad = LoraAdapter::<f64>::new(point(4, 4), 2, &mut rng);
        ad.b.value = Tensor::randn(4, 2, 1.0, &mut rng);
        let x = [0.3, -0.1, 0.7, 1.1];
        let d1 = adapter_delta::<f64, ChaCha8Rng>(&x, &ad, 16.0 / 2.0, None).unwrap();
        let d2 = adapter_delta::<f64, ChaCha8Rng>(&x, &ad, 32.0 / 2.0, None).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn merge_with_zero_b_is_exact_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ad = LoraAdapter::<f64>::new(point(8, 8), 2, &mut rng);
        let base = Tensor::randn(8, 8, 1.0, &mut rng);
        assert_eq!(merge(&ad, &base, 3.0).unwrap(), base);
        ad.b.value = Tensor::randn(8, 2, 1.0, &mut rng);
        let merged = merge(&ad, &base, 3.0).unwrap();
        let back = merged.sub(&ad.dense_delta(3.0));
        assert!(back.max_abs_diff(&base) < 1e-6);
        assert!(matches!(merge(&ad, &Tensor::zeros(8, 7), 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rank_split_and_counts() {
        assert_eq!(per_expert_rank(96, 6).unwrap(), 16);
        assert!(matches!(per_expert_rank(96, 5), Err(Error::RankNotDivisible { r: 96, experts: 5 })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = LoraAdapter::<f64>::new(point(64, 64), 8, &mut rng);
        assert_eq!(one.param_count(), 1024);
        assert_eq!(trainable_param_count(&AdapterBank::<f64>::empty()), 0);
        let bb = tiny_backbone();
        let cfg = LoraConfig { r: 4, ..Default::default() }.with_targets(&[PointName::QProj]);
        let bank = AdapterBank::inject(&bb, &cfg, 2, 0).unwrap();
        // 2 layers × 2 experts × rank 2 × (8 + 8)
        assert_eq!(trainable_param_count(&bank), 2 * 2 * 2 * 16);
    }

    #[test]
    fn fresh_bank_is_identity_overlay() {
        let bb = tiny_backbone();
        let bank = AdapterBank::inject(&bb, &LoraConfig::default(), 1, 3).unwrap();
        let batch = vec![
            MultimodalSample::with_image("a", vec![0.2, -0.4, 1.0, 0.3], "name it", "cat", "t"),
            MultimodalSample::text_only("b", "hello there", "hi", "t"),
        ];
        let plain = bb.forward(&batch, None, None).unwrap();
        let overlay = &bank;
        let with = bb.forward(&batch, Some(&overlay), None).unwrap();
        for (p, w) in plain.logits.iter().zip(&with.logits) {
            assert!(p.max_abs_diff(w) < 1e-6);
        }
        assert!((plain.loss - with.loss).abs() < 1e-6);
    }

    #[test]
    fn records_round_trip_bitwise() {
        let bb = tiny_backbone();
        let cfg = LoraConfig::default();
        let mut bank = AdapterBank::<f64>::inject(&bb, &cfg, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        bank.visit_params_mut(&mut |p| p.value = Tensor::randn(p.value.rows(), p.value.cols(), 1.0, &mut rng));
        let rec = bank.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let mut other = AdapterBank::<f64>::inject(&bb, &cfg, 1, 99).unwrap();
        other.load_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(other.to_record(), rec);
    }
}
