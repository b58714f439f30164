//! Small dense linear algebra helpers.

use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as the columns of the second tensor.
pub fn symmetric_eigen<T: Scalar>(m: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigen needs a square matrix");
    let mut a = m.clone();
    let mut v = Tensor::zeros(n, n);
    for i in 0..n {
        v.set(i, i, T::one());
    }
    let scale = a.data().iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, i));
        }
    }
    (values, vectors)
}

/// Modified Gram-Schmidt. Vectors whose residual norm falls below `tol`
/// are dropped.
pub fn orthonormalize<T: Scalar>(vectors: &[Vec<T>], tol: T) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for b in &basis {
            let c = dot(&r, b);
            r.iter_mut().zip(b).for_each(|(x, &y)| *x -= c * y);
        }
        let n = dot(&r, &r).sqrt();
        if n > tol {
            r.iter_mut().for_each(|x| *x /= n);
            basis.push(r);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_random_symmetric_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(6, 6, 1.0, &mut rng);
        let m = x.add(&x.transpose());
        let (vals, vecs) = symmetric_eigen(&m);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let mut diag = Tensor::zeros(6, 6);
        for (i, &l) in vals.iter().enumerate() {
            diag.set(i, i, l);
        }
        let back = vecs.matmul(&diag).matmul(&vecs.transpose());
        assert!(back.max_abs_diff(&m) < 1e-10);
        let gram = vecs.t_matmul(&vecs);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let m = Tensor::<f32>::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]);
        let (vals, _) = symmetric_eigen(&m);
        assert!((vals[0] - 3.0).abs() < 1e-5 && (vals[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gram_schmidt_drops_dependent_vectors() {
        let b = orthonormalize(&[vec![1.0f64, 1.0], vec![2.0, 2.0], vec![0.0, 3.0]], 1e-9);
        assert_eq!(b.len(), 2);
        assert!(dot(&b[0], &b[1]).abs() < 1e-12);
    }
}
