//! Eigenvalue-ratio screen for essential unidimensionality.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::eigen::jacobi_eigen;
use crate::data::{pearson, ResponseMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_RATIO_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimScreenResult {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// First over second eigenvalue; `None` when the second is not positive.
    pub ratio_1_2: Option<f64>,
    pub unidimensional: bool,
    /// Items entering the correlation matrix (those with variance).
    pub items_used: Vec<usize>,
}

/// Pairwise-complete Pearson correlations among `items` for persons in `group`.
pub fn correlation_matrix(data: &ResponseMatrix, group: usize, items: &[usize]) -> DMatrix<f64> {
    let persons: Vec<usize> = (0..data.n_persons())
        .filter(|&p| data.group_of(p) == group)
        .collect();
    let k = items.len();
    let mut r = DMatrix::identity(k, k);
    let mut pairs = Vec::with_capacity(persons.len());
    for a in 0..k {
        for b in (a + 1)..k {
            pairs.clear();
            for &p in &persons {
                if let (Some(x), Some(y)) = (data.cell(p, items[a]), data.cell(p, items[b])) {
                    pairs.push((x as u8 as f64, y as u8 as f64));
                }
            }
            let rho = pearson(&pairs).unwrap_or(0.0);
            r[(a, b)] = rho;
            r[(b, a)] = rho;
        }
    }
    r
}

pub fn dim_screen(data: &ResponseMatrix, group: usize, threshold: f64) -> Result<DimScreenResult> {
    if group >= data.n_groups() {
        return Err(Error::Invalid(format!("group index {group} out of range")));
    }
    let items: Vec<usize> = (0..data.n_items())
        .filter(|&i| {
            let mut seen = [false; 2];
            for p in 0..data.n_persons() {
                if data.group_of(p) == group {
                    if let Some(x) = data.cell(p, i) {
                        seen[x as usize] = true;
                    }
                }
            }
            seen[0] && seen[1]
        })
        .collect();
    if items.len() < 2 {
        return Err(Error::DegenerateCorrelation);
    }
    let r = correlation_matrix(data, group, &items);
    let eig = jacobi_eigen(&r, 1e-10);
    let eigenvalues: Vec<f64> = eig.values.iter().copied().collect();
    let ratio_1_2 = (eigenvalues[1] > 0.0).then(|| eigenvalues[0] / eigenvalues[1]);
    Ok(DimScreenResult {
        unidimensional: ratio_1_2.is_none_or(|r| r >= threshold),
        eigenvalues,
        ratio_1_2,
        items_used: items,
    })
}
