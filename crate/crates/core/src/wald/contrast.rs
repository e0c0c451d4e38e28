//! Reference-versus-focal contrasts and the Wald chi-square statistic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::jacobi_eigen;

pub const MAX_CONDITION: f64 = 1e12;

/// Which per-item parameters a contrast compares. Parameter positions within
/// a group block are slope, intercept, guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastSubset {
    All,
    SlopesOnly,
    InterceptsOnly,
    /// Slope and intercept but not guessing.
    SlopesAndIntercepts,
}

impl ContrastSubset {
    fn positions(self, k: usize) -> Vec<usize> {
        match self {
            ContrastSubset::All => (0..k).collect(),
            ContrastSubset::SlopesOnly => vec![0],
            ContrastSubset::InterceptsOnly => vec![1.min(k - 1)],
            ContrastSubset::SlopesAndIntercepts => (0..k.min(2)).collect(),
        }
    }
}

/// Contrast coefficients over a group-major stacked parameter vector
/// `[group 0 params.., group 1 params.., ..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    pub matrix: DMatrix<f64>,
    pub n_groups: usize,
    pub params_per_group: usize,
}

impl ContrastMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }
}

/// One row per focal group and compared parameter: reference minus focal.
pub fn build_contrasts(n_groups: usize, k: usize, subset: ContrastSubset) -> ContrastMatrix {
    assert!(n_groups >= 2, "contrasts need two or more groups");
    assert!(k >= 1, "contrasts need at least one parameter per group");
    let positions = subset.positions(k);
    let mut matrix = DMatrix::zeros((n_groups - 1) * positions.len(), n_groups * k);
    let mut row = 0;
    for &p in &positions {
        for g in 1..n_groups {
            matrix[(row, p)] = 1.0;
            matrix[(row, g * k + p)] = -1.0;
            row += 1;
        }
    }
    ContrastMatrix {
        matrix,
        n_groups,
        params_per_group: k,
    }
}

/// `Q = (Cv)' (C Sigma C')^-1 (Cv)` with `df` = rows of `C`.
pub fn wald_q(v: &DVector<f64>, sigma: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(f64, usize)> {
    if c.ncols() != v.len() || sigma.nrows() != v.len() || sigma.ncols() != v.len() {
        return Err(Error::Invalid("contrast dimensions do not match".into()));
    }
    let d = c * v;
    let m = c * sigma * c.transpose();
    let eig = jacobi_eigen(&m, 1e-14);
    let max = eig.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::SingularContrastCovariance {
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    let proj = eig.vectors.transpose() * d;
    let q: f64 = proj.iter().zip(eig.values.iter()).map(|(u, l)| u * u / l).sum();
    Ok((q.max(0.0), c.nrows()))
}
