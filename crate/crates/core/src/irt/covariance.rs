//! Parameter covariance at the optimum.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::em::{FitResult, Model};
use super::estep::{accumulate_group_gradient, GroupCounts};
use super::plan::ModelState;
use crate::data::ResponseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovarianceMethod {
    /// Inverse negative Hessian, by central differences of the analytic gradient.
    #[default]
    ObservedInfoFD,
    /// Supplemented EM: complete-data information corrected by the EM rate matrix.
    SEM,
}

const SEM_NEWTON_ITERS: usize = 50;

fn fd_step(value: f64) -> f64 {
    1e-4 * value.abs().max(1.0)
}

fn perturbed(model: &Model<'_>, state: &ModelState, k: usize, value: f64) -> ModelState {
    let mut s = state.clone();
    model.layout.set_coordinate(k, value, &mut s);
    s
}

/// Negative Hessian of the penalized marginal log-likelihood at the fit.
///
/// Each column is a central difference of the analytic gradient; only groups
/// whose likelihood involves the perturbed coordinate are re-evaluated.
pub fn observed_information(data: &ResponseMatrix, fit: &FitResult) -> Result<DMatrix<f64>> {
    let model = Model::new(data, &fit.specs, &fit.plan, &fit.quadrature)?;
    Ok(information_fd(&model, &fit.state))
}

fn information_fd(model: &Model<'_>, state: &ModelState) -> DMatrix<f64> {
    let p = model.layout.len();
    let base = model.layout.pack(state);
    let columns: Vec<DVector<f64>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let h = fd_step(base[k]);
            let plus = perturbed(model, state, k, base[k] + h);
            let minus = perturbed(model, state, k, base[k] - h);
            let mut diff = DVector::zeros(p);
            for g in model.layout.groups_touching(k) {
                diff += model.group_gradient(&plus, g) - model.group_gradient(&minus, g);
            }
            model.add_penalty_gradient(&plus, &mut diff);
            let mut neg = DVector::zeros(p);
            model.add_penalty_gradient(&minus, &mut neg);
            (diff - neg) / (2.0 * h)
        })
        .collect();
    let mut hess = DMatrix::zeros(p, p);
    for (k, col) in columns.iter().enumerate() {
        hess.set_column(k, col);
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    -hess
}

/// Symmetric inverse of a positive definite information matrix.
fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = info.clone().cholesky().ok_or(Error::SingularInformation)?;
    let diag = chol.l().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d * d), hi.max(d * d)));
    if !(lo > 0.0) || hi / lo > 1e14 {
        return Err(Error::SingularInformation);
    }
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn param_covariance(
    data: &ResponseMatrix,
    fit: &FitResult,
    method: CovarianceMethod,
) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::Invalid("covariance requires a converged fit".into()));
    }
    let model = Model::new(data, &fit.specs, &fit.plan, &fit.quadrature)?;
    match method {
        CovarianceMethod::ObservedInfoFD => invert_information(&information_fd(&model, &fit.state)),
        CovarianceMethod::SEM => sem_covariance(&model, &fit.state),
    }
}

/// Computes the covariance and stores it on the fit.
pub fn attach_covariance(
    data: &ResponseMatrix,
    fit: &mut FitResult,
    method: CovarianceMethod,
) -> Result<()> {
    fit.covariance = Some(param_covariance(data, fit, method)?);
    Ok(())
}

/// Gradient of the expected complete-data objective under fixed `counts`.
fn q_gradient(model: &Model<'_>, counts: &[GroupCounts], state: &ModelState) -> DVector<f64> {
    let mut grad = DVector::zeros(model.layout.len());
    for (g, c) in counts.iter().enumerate() {
        accumulate_group_gradient(c, g, state, &model.layout, model.quad, &mut grad);
    }
    model.add_penalty_gradient(state, &mut grad);
    grad
}

/// One EM map with the M-step solved jointly: a few coordinate rounds, then
/// Newton steps with the complete-data information held fixed.
fn em_map(model: &Model<'_>, state: &ModelState, complete: &Cholesky<f64, Dyn>) -> DVector<f64> {
    let counts: Vec<_> = (0..model.n_groups()).map(|g| model.estep(state, g)).collect();
    let mut s = state.clone();
    model.mstep_all(&mut s, &counts, 5);
    let mut x = model.layout.pack(&s);
    for _ in 0..SEM_NEWTON_ITERS {
        let step = complete.solve(&q_gradient(model, &counts, &s));
        x += &step;
        model.layout.unpack(&x, &mut s);
        if step.amax() < 1e-12 {
            break;
        }
    }
    x
}

fn sem_covariance(model: &Model<'_>, state: &ModelState) -> Result<DMatrix<f64>> {
    let p = model.layout.len();
    let base = model.layout.pack(state);
    let counts: Vec<_> = (0..model.n_groups()).map(|g| model.estep(state, g)).collect();

    // Complete-data information: negative Hessian of the expected
    // complete-data objective with the posterior held at the optimum.
    let cols: Vec<DVector<f64>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let h = fd_step(base[k]);
            let plus = perturbed(model, state, k, base[k] + h);
            let minus = perturbed(model, state, k, base[k] - h);
            (q_gradient(model, &counts, &minus) - q_gradient(model, &counts, &plus)) / (2.0 * h)
        })
        .collect();
    let mut complete = DMatrix::zeros(p, p);
    for (k, c) in cols.iter().enumerate() {
        complete.set_column(k, c);
    }
    let complete = (&complete + complete.transpose()) * 0.5;
    let complete_inv = invert_information(&complete)?;
    let chol = complete.cholesky().ok_or(Error::SingularInformation)?;

    // Rate matrix of the EM map by central differences.
    let cols: Vec<DVector<f64>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let h = fd_step(base[k]);
            let plus = perturbed(model, state, k, base[k] + h);
            let minus = perturbed(model, state, k, base[k] - h);
            (em_map(model, &plus, &chol) - em_map(model, &minus, &chol)) / (2.0 * h)
        })
        .collect();
    let mut rate = DMatrix::zeros(p, p);
    for (k, c) in cols.iter().enumerate() {
        rate.set_column(k, c);
    }
    let factor = (DMatrix::<f64>::identity(p, p) - rate)
        .try_inverse()
        .ok_or(Error::SingularInformation)?;
    let cov = factor * complete_inv;
    Ok((&cov + cov.transpose()) * 0.5)
}
