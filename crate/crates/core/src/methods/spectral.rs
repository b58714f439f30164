//! Spectral anchors over adapter-parameter snapshots and gradient
//! consolidation against them.

use crate::linalg::{orthonormalize, symmetric_eigen};
use crate::methods::config::SameConfig;
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// Principal directions of a snapshot window.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralAnchors<T> {
    pub directions: Vec<Vec<T>>,
    /// Share of the window's covariance energy captured by `directions`.
    pub captured: T,
}

/// Centers the window, takes the leading eigenvectors of its covariance
/// (via the snapshot Gram matrix) and keeps the smallest prefix reaching
/// `energy_ratio`, capped at `max_components` and `window − 1`.
pub fn same_update_anchors<T: Scalar>(snapshots: &[Vec<T>], config: &SameConfig) -> SpectralAnchors<T> {
    let empty = SpectralAnchors { directions: Vec::new(), captured: T::zero() };
    let k = snapshots.len();
    if k < 2 {
        return empty;
    }
    let dim = snapshots[0].len();
    let mut mean = vec![T::zero(); dim];
    for s in snapshots {
        mean.iter_mut().zip(s).for_each(|(m, &x)| *m += x);
    }
    let kt = T::from_usize_lossy(k);
    mean.iter_mut().for_each(|m| *m /= kt);
    let centered: Vec<Vec<T>> =
        snapshots.iter().map(|s| s.iter().zip(&mean).map(|(&x, &m)| x - m).collect()).collect();

    let mut gram = Tensor::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(&centered[i], &centered[j]);
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let (values, vectors) = symmetric_eigen(&gram);
    let total: T = values.iter().map(|&l| l.max(T::zero())).sum();
    let scale: T = snapshots.iter().map(|s| dot(s, s)).sum::<T>() + T::one();
    if total <= T::epsilon() * T::lit(64.0) * scale {
        return empty;
    }
    let cap = config.max_components.min(k - 1);
    let target = T::lit(config.energy_ratio);
    let mut directions = Vec::new();
    let mut captured = T::zero();
    for (i, &lambda) in values.iter().enumerate() {
        if directions.len() >= cap || captured / total >= target || lambda <= total * T::lit(1e-12) {
            break;
        }
        let inv = T::one() / lambda.sqrt();
        let mut u = vec![T::zero(); dim];
        for (r, c) in centered.iter().enumerate() {
            let w = vectors.get(r, i) * inv;
            u.iter_mut().zip(c).for_each(|(a, &x)| *a += w * x);
        }
        directions.push(u);
        captured += lambda;
    }
    let directions = orthonormalize(&directions, T::lit(1e-6));
    SpectralAnchors { directions, captured: captured / total }
}

/// EMA (momentum `mu`) of the normalised squared projection `⟨g,d⟩²/‖g‖²`
/// over the recorded gradients.
pub fn importance<T: Scalar>(gradients: &[Vec<T>], direction: &[T], mu: T) -> T {
    let mut s = T::zero();
    for g in gradients {
        let gg = dot(g, g);
        if gg == T::zero() {
            continue;
        }
        let p = dot(g, direction);
        s = mu * s + (T::one() - mu) * p * p / gg;
    }
    s
}

/// Orthonormal basis of the anchors whose importance exceeds `tau_score`.
pub fn protected_basis<T: Scalar>(anchors: &[Vec<T>], scores: &[T], tau_score: T) -> Vec<Vec<T>> {
    let kept: Vec<Vec<T>> =
        anchors.iter().zip(scores).filter(|(_, &s)| s > tau_score).map(|(d, _)| d.clone()).collect();
    orthonormalize(&kept, T::lit(1e-6))
}

/// `g − Σ⟨g,d⟩d` over an orthonormal basis.
pub fn project_out<T: Scalar>(g: &[T], basis: &[Vec<T>]) -> Vec<T> {
    let mut out = g.to_vec();
    for d in basis {
        let c = dot(&out, d);
        out.iter_mut().zip(d).for_each(|(x, &y)| *x -= c * y);
    }
    out
}

/// Removes the gradient's component along every protected anchor.
pub fn same_consolidate<T: Scalar>(g: &[T], anchors: &[Vec<T>], scores: &[T], config: &SameConfig) -> Vec<T> {
    let basis = protected_basis(anchors, scores, T::lit(config.tau_score));
    project_out(g, &basis)
}
