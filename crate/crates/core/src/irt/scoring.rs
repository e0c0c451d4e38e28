//! Person scores and item characteristic curves from a fitted model.

use serde::{Deserialize, Serialize};

use super::em::FitResult;
use super::estep::posterior;
use crate::data::ResponseMatrix;

/// Posterior mean and sd of the latent trait for every person, in row order.
/// A person without responses gets their group's prior mean and sd.
pub fn eap_scores(data: &ResponseMatrix, fit: &FitResult) -> Vec<(f64, f64)> {
    (0..data.n_persons())
        .map(|p| {
            let g = data.group_of(p);
            let row = data.row(p);
            if row.iter().all(Option::is_none) {
                let d = fit.state.dists[g];
                return (d.mean, d.sd);
            }
            let (thetas, w) = posterior(row, g, &fit.state, &fit.quadrature);
            let mean: f64 = thetas.iter().zip(&w).map(|(t, w)| t * w).sum();
            let var: f64 = thetas
                .iter()
                .zip(&w)
                .map(|(t, w)| w * (t - mean) * (t - mean))
                .sum();
            (mean, var.max(0.0).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub item_id: String,
    pub group: String,
    pub theta: f64,
    pub prob: f64,
}

/// Evenly spaced grid, endpoints included.
pub fn theta_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Default plotting grid: 81 points on [-4, 4].
pub fn default_grid() -> Vec<f64> {
    theta_grid(81, -4.0, 4.0)
}

/// Response probability of every item in every group at each grid point,
/// ordered item, group, theta.
pub fn icc_table(fit: &FitResult, group_names: &[String], grid: &[f64]) -> Vec<IccRow> {
    let mut rows = Vec::with_capacity(fit.n_items() * fit.n_groups() * grid.len());
    for (j, spec) in fit.specs.iter().enumerate() {
        for g in 0..fit.n_groups() {
            let item = fit.params(j, g);
            for &t in grid {
                rows.push(IccRow {
                    item_id: spec.id.clone(),
                    group: group_names.get(g).cloned().unwrap_or_else(|| g.to_string()),
                    theta: t,
                    prob: item.prob(t),
                });
            }
        }
    }
    rows
}
