//! Multi-group logistic regression of an item on the matching score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irt::{sigmoid, softplus};

pub const SEPARATION_LIMIT: f64 = 15.0;
const TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;

/// Nested model family. Coefficients are ordered
/// `[alpha, beta, alpha_1..alpha_F, beta_1..beta_F]`, truncated per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogisticModel {
    /// Group-specific intercepts and slopes.
    Full,
    /// Group-specific intercepts, common slope.
    GroupInterceptsOnly,
    /// One curve for every group.
    CommonOnly,
}

impl LogisticModel {
    pub fn n_coefficients(self, n_focal: usize) -> usize {
        match self {
            LogisticModel::Full => 2 + 2 * n_focal,
            LogisticModel::GroupInterceptsOnly => 2 + n_focal,
            LogisticModel::CommonOnly => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub coefficients: Vec<f64>,
    /// Inverse observed information, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub loglik: f64,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len())
            .map(|k| self.covariance[k][k].max(0.0).sqrt())
            .collect()
    }
}

fn design_row(model: LogisticModel, n_focal: usize, s: f64, group: usize, row: &mut [f64]) {
    row.fill(0.0);
    row[0] = 1.0;
    row[1] = s;
    if group > 0 {
        match model {
            LogisticModel::CommonOnly => {}
            LogisticModel::GroupInterceptsOnly => row[1 + group] = 1.0,
            LogisticModel::Full => {
                row[1 + group] = 1.0;
                row[1 + n_focal + group] = s;
            }
        }
    }
}

fn design(model: LogisticModel, scores: &[f64], groups: &[usize], n_groups: usize) -> DMatrix<f64> {
    let n_focal = n_groups - 1;
    let p = model.n_coefficients(n_focal);
    let mut x = DMatrix::zeros(scores.len(), p);
    let mut row = vec![0.0; p];
    for (i, (&s, &g)) in scores.iter().zip(groups).enumerate() {
        design_row(model, n_focal, s, g, &mut row);
        for (k, v) in row.iter().enumerate() {
            x[(i, k)] = *v;
        }
    }
    x
}

/// `X' diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    x.transpose() * xw
}

fn loglik(x: &DMatrix<f64>, y: &[bool], coef: &DVector<f64>) -> f64 {
    let eta = x * coef;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| if yi { e } else { 0.0 } - softplus(e))
        .sum()
}

/// Maximum-likelihood fit by Newton-Raphson with step halving.
pub fn fit_logistic(
    y: &[bool],
    scores: &[f64],
    groups: &[usize],
    n_groups: usize,
    model: LogisticModel,
) -> Result<LogisticFit> {
    if y.len() != scores.len() || y.len() != groups.len() {
        return Err(Error::Invalid("response, score and group lengths differ".into()));
    }
    if n_groups < 2 {
        return Err(Error::Invalid("logistic DIF needs at least two groups".into()));
    }
    let mut present = vec![false; n_groups];
    for &g in groups {
        if g >= n_groups {
            return Err(Error::Invalid(format!("group index {g} out of range")));
        }
        present[g] = true;
    }
    if let Some(g) = present.iter().position(|p| !p) {
        return Err(Error::Invalid(format!("group {g} has no observations")));
    }
    let first = scores.first().copied().unwrap_or(0.0);
    if scores.iter().all(|&s| s == first) {
        return Err(Error::Invalid("matching score takes fewer than two values".into()));
    }

    let x = design(model, scores, groups, n_groups);
    let p = x.ncols();
    let mut coef = DVector::zeros(p);
    let mut current = loglik(&x, y, &coef);
    let yv = DVector::from_iterator(y.len(), y.iter().map(|&b| b as u8 as f64));
    for iter in 1..=MAX_ITER {
        let eta = &x * &coef;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&yv - &mu);
        let info = weighted_gram(&x, &w);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => info
                .clone()
                .lu()
                .solve(&grad)
                .filter(|s| s.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::SeparationDetected {
                    magnitude: coef.amax(),
                })?,
        };
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &coef + &step * scale;
            let ll = loglik(&x, y, &trial);
            if ll >= current - 1e-12 {
                next = Some((trial, ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, ll)) = next else {
            break;
        };
        let change = (&trial - &coef).amax();
        coef = trial;
        current = ll;
        if coef.amax() > SEPARATION_LIMIT {
            return Err(Error::SeparationDetected {
                magnitude: coef.amax(),
            });
        }
        if change < TOL {
            return finish(model, &x, coef, current, iter);
        }
        if iter == MAX_ITER {
            return Err(Error::IterationLimit(MAX_ITER));
        }
    }
    finish(model, &x, coef, current, MAX_ITER)
}

fn finish(
    model: LogisticModel,
    x: &DMatrix<f64>,
    coef: DVector<f64>,
    loglik: f64,
    iterations: usize,
) -> Result<LogisticFit> {
    let w = (x * &coef).map(|e| {
        let m = sigmoid(e);
        m * (1.0 - m)
    });
    let info = weighted_gram(x, &w);
    let cov = info.cholesky().ok_or(Error::SeparationDetected {
        magnitude: coef.amax(),
    })?;
    let cov = cov.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LogisticFit {
        model,
        coefficients: coef.iter().copied().collect(),
        covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        loglik,
        iterations,
    })
}

/// Likelihood-ratio statistic `-2 (L0 - L1)` for nested fits, clipped at 0.
pub fn lr_lambda(l0: f64, l1: f64) -> Result<f64> {
    if l0 > l1 + 1e-6 {
        return Err(Error::NestingViolation {
            restricted: l0,
            full: l1,
        });
    }
    Ok((-2.0 * (l0 - l1)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lambda_arithmetic() {
        assert_eq!(lr_lambda(-50.0, -50.0).unwrap(), 0.0);
        assert_abs_diff_eq!(lr_lambda(-100.0, -97.0).unwrap(), 6.0, epsilon = 1e-12);
        assert!(matches!(
            lr_lambda(-90.0, -97.0),
            Err(Error::NestingViolation { .. })
        ));
    }

    #[test]
    fn loglik_matches_direct_evaluation() {
        let y = [true, false, true, true, false, false];
        let s = [-1.0, -0.5, 0.2, 1.3, 0.4, -0.8];
        let g = [0, 0, 0, 1, 1, 1];
        let fit = fit_logistic(&y, &s, &g, 2, LogisticModel::CommonOnly).unwrap();
        let (a, b) = (fit.coefficients[0], fit.coefficients[1]);
        let direct: f64 = y
            .iter()
            .zip(&s)
            .map(|(&yi, &si)| {
                let p = 1.0 / (1.0 + (-(a + b * si)).exp());
                if yi {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum();
        assert_abs_diff_eq!(fit.loglik, direct, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_groups_give_zero_group_terms() {
        let base: Vec<(bool, f64)> = vec![
            (false, -1.5),
            (false, -0.5),
            (true, -0.5),
            (false, 0.5),
            (true, 0.5),
            (true, 1.5),
        ];
        let mut y = Vec::new();
        let mut s = Vec::new();
        let mut g = Vec::new();
        for grp in 0..3 {
            for &(yi, si) in &base {
                y.push(yi);
                s.push(si);
                g.push(grp);
            }
        }
        let fit = fit_logistic(&y, &s, &g, 3, LogisticModel::Full).unwrap();
        for c in &fit.coefficients[2..] {
            assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn separation_is_reported() {
        let y = [false, false, false, true, true, true];
        let s = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let g = [0, 1, 0, 1, 0, 1];
        assert!(matches!(
            fit_logistic(&y, &s, &g, 2, LogisticModel::CommonOnly),
            Err(Error::SeparationDetected { .. })
        ));
    }
}
