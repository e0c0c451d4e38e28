//! Cyclic Jacobi eigendecomposition of real symmetric matrices.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues in descending order; `vectors` holds matching unit columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    /// Ratio of the largest to the smallest eigenvalue magnitude.
    pub fn condition_number(&self) -> f64 {
        let max = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = self.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

const MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Diagonalizes `m` by plane rotations until the off-diagonal Frobenius norm
/// falls below `tol` (scaled by the matrix norm when that exceeds one).
pub fn jacobi_eigen(m: &DMatrix<f64>, tol: f64) -> EigenDecomposition {
    assert!(m.is_square(), "Jacobi needs a square matrix");
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let threshold = tol * a.norm().max(1.0);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    EigenDecomposition { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_by_two() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = jacobi_eigen(&m, 1e-12);
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.condition_number(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_is_fixed() {
        let e = jacobi_eigen(&DMatrix::identity(4, 4), 1e-12);
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn reconstructs_random_symmetric(vals in prop::collection::vec(-5.0f64..5.0, 36)) {
            let b = DMatrix::from_row_slice(6, 6, &vals);
            let m = &b + b.transpose();
            let e = jacobi_eigen(&m, 1e-12);
            let diff = (e.reconstruct() - &m).abs().max();
            prop_assert!(diff < 1e-8);
            let vtv = e.vectors.transpose() * &e.vectors;
            prop_assert!((vtv - DMatrix::identity(6, 6)).abs().max() < 1e-10);
            for k in 1..6 {
                prop_assert!(e.values[k - 1] >= e.values[k]);
            }
        }
    }
}
