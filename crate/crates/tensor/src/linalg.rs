//! Small dense linear algebra.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Eigen decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen<T = f64> {
    /// Ascending.
    pub values: Vec<T>,
    /// Column `i` of this `n×n` tensor is the unit eigenvector for `values[i]`.
    pub vectors: Tensor<T>,
}

impl<T: Real> SymEigen<T> {
    pub fn vector(&self, i: usize) -> Vec<T> {
        let n = self.values.len();
        (0..n).map(|r| self.vectors.data()[r * n + i]).collect()
    }
}

/// Cyclic Jacobi eigenvalue algorithm for symmetric matrices.
///
/// The input must be symmetric to within `1e-9` relative to its largest
/// entry (absolute `1e-9` below unit scale).
pub fn self_adjoint_eigen<T: Real>(a: &Tensor<T>) -> Result<SymEigen<T>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(TensorError::Dimension(format!("eigen needs a square matrix, got {:?}", a.shape())));
    }
    let n = a.shape()[0];
    let scale = a.data().iter().fold(T::one(), |m, &x| m.max(x.abs()));
    let tol = T::lit(1e-9) * scale;
    for i in 0..n {
        for j in i + 1..n {
            if (a.at2(i, j) - a.at2(j, i)).abs() > tol {
                return Err(TensorError::Contract(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a.at2(i, j),
                    a.at2(j, i)
                )));
            }
        }
    }
    let mut m: Vec<T> = a.data().to_vec();
    // Work on the exactly symmetric part.
    for i in 0..n {
        for j in i + 1..n {
            let s = (m[i * n + j] + m[j * n + i]) * T::lit(0.5);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = Tensor::<T>::identity(n).into_data();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let diag: T = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = T::zero();
                m[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![T::zero(); n * n];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + new] = v[r * n + old];
        }
    }
    Ok(SymEigen { values, vectors: Tensor::new(&[n, n], vecs)? })
}

/// Flips `v` so its first entry with magnitude above `sqrt(eps)` is positive.
pub fn fix_sign<T: Real>(v: &mut [T]) {
    let thresh = T::epsilon().sqrt();
    if let Some(&first) = v.iter().find(|x| x.abs() > thresh) {
        if first < T::zero() {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Solves `a x = b` for square `a` by partial-pivot Gaussian elimination.
pub fn solve<T: Real>(a: &Tensor<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.shape()[0];
    if a.rank() != 2 || a.shape()[1] != n || b.len() != n {
        return Err(TensorError::Dimension("solve needs square a and matching b".into()));
    }
    let mut m = a.data().to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())
            .unwrap();
        if m[piv * n + col].abs() <= T::epsilon() * T::lit(1e3) {
            return Err(TensorError::Contract("singular matrix".into()));
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for k in col..n {
                let t = m[col * n + k];
                m[r * n + k] -= f * t;
            }
            let t = x[col];
            x[r] -= f * t;
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for k in r + 1..n {
            s -= m[r * n + k] * x[k];
        }
        x[r] = s / m[r * n + r];
    }
    Ok(x)
}

/// Inverse of a 3×3 matrix (row-major), or `None` when singular.
pub fn inverse3<T: Real>(m: &[T; 9]) -> Option<[T; 9]> {
    let det = det3(m);
    if det.abs() <= T::min_positive_value() || !det.is_finite() {
        return None;
    }
    let inv = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(inv.map(|x| x / det))
}

pub fn det3<T: Real>(m: &[T; 9]) -> T {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
}

pub fn mul3<T: Real>(a: &[T; 9], b: &[T; 9]) -> [T; 9] {
    let mut out = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    out
}

pub fn mul3v<T: Real>(a: &[T; 9], v: &[T; 3]) -> [T; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

pub fn transpose3<T: Real>(a: &[T; 9]) -> [T; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn diagonal_case() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let e = self_adjoint_eigen(&a).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn swap_matrix() {
        let a = Tensor::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let e = self_adjoint_eigen(&a).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-15);
        assert!((e.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.0]]).unwrap();
        assert!(matches!(self_adjoint_eigen(&a), Err(TensorError::Contract(_))));
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = Rng::new(11);
        for n in [2usize, 5, 9] {
            let mut a = Tensor::<f64>::zeros(&[n, n]);
            for i in 0..n {
                for j in i..n {
                    let x = rng.uniform(-1.0, 1.0);
                    a.set2(i, j, x);
                    a.set2(j, i, x);
                }
            }
            let e = self_adjoint_eigen(&a).unwrap();
            let v = &e.vectors;
            let mut lam = Tensor::<f64>::zeros(&[n, n]);
            for i in 0..n {
                lam.set2(i, i, e.values[i]);
            }
            let rec = v.matmul(&lam).unwrap().matmul(&v.transpose()).unwrap();
            assert!(rec.max_abs_diff(&a) < 1e-8);
            let gram = v.transpose().matmul(v).unwrap();
            assert!(gram.max_abs_diff(&Tensor::identity(n)) < 1e-12);
            for i in 0..n {
                let vi = e.vector(i);
                let av = a.matmul(&Tensor::new(&[n, 1], vi.clone()).unwrap()).unwrap();
                for r in 0..n {
                    assert!((av.data()[r] - e.values[i] * vi[r]).abs() < 1e-8);
                }
            }
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn works_in_f32() {
        let a = Tensor::<f32>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = self_adjoint_eigen(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-6);
        assert!((e.values[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn solve_small() {
        let a = Tensor::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = solve(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }
}
