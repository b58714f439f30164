//! Task anchors and the routing rules built on them.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, MultimodalSample};
use crate::error::{Error, Result};
use crate::scalar::{argmax, cosine, normalized, softmax, Scalar};
use crate::tensor::Tensor;

/// Frozen routing features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures<T> {
    pub image: Option<Vec<T>>,
    pub text: Vec<T>,
}

pub fn sample_features<T: Scalar>(backbone: &Backbone<T>, sample: &MultimodalSample) -> Result<SampleFeatures<T>> {
    let image = match &sample.image_features {
        Some(f) => Some(backbone.image_features(f)?),
        None => None,
    };
    Ok(SampleFeatures { image, text: backbone.text_features(&sample.instruction) })
}

/// Unit-norm image and text anchors of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAnchor<T> {
    pub image: Option<Vec<T>>,
    pub text: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<f64>>,
    pub text: Vec<f64>,
}

impl<T: Scalar> TaskAnchor<T> {
    pub fn to_record(&self) -> AnchorRecord {
        let conv = |v: &Vec<T>| v.iter().map(|x| x.to_f64_lossy()).collect();
        AnchorRecord { image: self.image.as_ref().map(conv), text: conv(&self.text) }
    }

    pub fn from_record(r: &AnchorRecord) -> Self {
        let conv = |v: &Vec<f64>| v.iter().map(|&x| T::lit(x)).collect();
        Self { image: r.image.as_ref().map(conv), text: conv(&r.text) }
    }
}

/// One anchor per completed task, in task order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorStore<T> {
    pub entries: Vec<TaskAnchor<T>>,
}

impl<T: Scalar> AnchorStore<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, anchor: TaskAnchor<T>) {
        self.entries.push(anchor);
    }

    pub fn to_records(&self) -> Vec<AnchorRecord> {
        self.entries.iter().map(TaskAnchor::to_record).collect()
    }

    pub fn from_records(records: &[AnchorRecord]) -> Self {
        Self { entries: records.iter().map(TaskAnchor::from_record).collect() }
    }
}

fn mean<T: Scalar>(vs: &[&Vec<T>]) -> Vec<T> {
    let mut m = vec![T::zero(); vs[0].len()];
    for v in vs {
        m.iter_mut().zip(v.iter()).for_each(|(a, &b)| *a += b);
    }
    let n = T::from_usize_lossy(vs.len());
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn unit_mean<T: Scalar>(vs: &[&Vec<T>], task: &str) -> Vec<T> {
    normalized(&mean(vs)).unwrap_or_else(|| {
        log::warn!("task `{task}`: degenerate anchor mean, falling back to the first sample");
        normalized(vs[0]).unwrap_or_else(|| vs[0].clone())
    })
}

/// Unit-normalised mean image and text features of a task.
pub fn hide_extract_anchors<T: Scalar>(task: &str, features: &[SampleFeatures<T>]) -> Result<TaskAnchor<T>> {
    if features.is_empty() {
        return Err(Error::EmptyTask(task.to_owned()));
    }
    let images: Vec<&Vec<T>> = features.iter().filter_map(|f| f.image.as_ref()).collect();
    let texts: Vec<&Vec<T>> = features.iter().map(|f| &f.text).collect();
    Ok(TaskAnchor {
        image: (!images.is_empty()).then(|| unit_mean(&images, task)),
        text: unit_mean(&texts, task),
    })
}

/// `w·cos_img + (1−w)·cos_txt`, or text similarity alone when either side lacks an image.
pub fn combined_similarity<T: Scalar>(sample: &SampleFeatures<T>, anchor: &TaskAnchor<T>, image_weight: T) -> T {
    let text = cosine(&sample.text, &anchor.text);
    match (&sample.image, &anchor.image) {
        (Some(si), Some(ai)) => image_weight * cosine(si, ai) + (T::one() - image_weight) * text,
        _ => text,
    }
}

pub fn similarities<T: Scalar>(sample: &SampleFeatures<T>, store: &AnchorStore<T>, image_weight: T) -> Vec<T> {
    store.entries.iter().map(|a| combined_similarity(sample, a, image_weight)).collect()
}

/// Predicted task: argmax of combined similarity, ties toward the lowest index.
pub fn hide_predict_task<T: Scalar>(sample: &SampleFeatures<T>, store: &AnchorStore<T>, image_weight: T) -> Result<usize> {
    if store.is_empty() {
        return Err(Error::NoAnchors);
    }
    Ok(argmax(&similarities(sample, store, image_weight)).expect("nonempty store"))
}

/// Largest multiple of `num_tasks` not exceeding `r`, and `alpha = 2·adjusted_r`.
pub fn disco_adjust_rank(r: usize, num_tasks: usize) -> Result<(usize, f64)> {
    if num_tasks == 0 || r < num_tasks {
        return Err(Error::RankTooSmall { r, num_tasks });
    }
    let adjusted = r - r % num_tasks;
    Ok((adjusted, 2.0 * adjusted as f64))
}

/// Expert weights `softmax(sim / τ)` over the stored prototypes.
pub fn disco_mask<T: Scalar>(sample: &SampleFeatures<T>, prototypes: &AnchorStore<T>, tau: T) -> Result<Vec<T>> {
    if prototypes.is_empty() {
        return Err(Error::NoPrototypes);
    }
    let sims: Vec<T> = similarities(sample, prototypes, T::lit(0.5)).into_iter().map(|s| s / tau).collect();
    Ok(softmax(&sims))
}

/// Indices of the top-`k` tasks under `λ·sim_img + (1−λ)·sim_txt`,
/// returned in ascending task order.
pub fn modalprompt_select<T: Scalar>(
    sample: &SampleFeatures<T>,
    prototypes: &AnchorStore<T>,
    k: usize,
    lambda: T,
) -> Result<Vec<usize>> {
    if k > prototypes.len() {
        return Err(Error::KTooLarge { k, available: prototypes.len() });
    }
    let scores = similarities(sample, prototypes, lambda);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

/// Soft router weights `softmax(R·x)` for a `num_experts × dim` router.
pub fn moe_route<T: Scalar>(router: &Tensor<T>, pooled: &[T]) -> Vec<T> {
    let logits = Tensor::row_vector(pooled.to_vec()).matmul_t(router);
    softmax(logits.data())
}

/// Per-token router weights `softmax(R·[x; e])`.
pub fn clmoe_route<T: Scalar>(router: &Tensor<T>, token: &[T], task_embedding: &[T]) -> Vec<T> {
    let mut input = token.to_vec();
    input.extend_from_slice(task_embedding);
    moe_route(router, &input)
}
