//! Posterior expected counts on the quadrature grid and the derivative
//! kernels built on them.

use nalgebra::DVector;
use rayon::prelude::*;

use super::params::{sigmoid, GroupDist, ItemParams};
use super::plan::{ModelState, ParamLayout};
use super::quadrature::Quadrature;
use crate::data::ResponseMatrix;
use crate::stats::CompensatedSum;

/// Persons per chunk in the E-step. Chunk boundaries are fixed so reductions
/// are identical whatever the thread count.
const CHUNK: usize = 256;

/// Observed responses of one group in compact form.
#[derive(Debug, Clone)]
pub(crate) struct GroupObs {
    pub persons: Vec<usize>,
    offsets: Vec<usize>,
    obs: Vec<(u32, bool)>,
}

impl GroupObs {
    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn person_obs(&self, k: usize) -> &[(u32, bool)] {
        &self.obs[self.offsets[k]..self.offsets[k + 1]]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub groups: Vec<GroupObs>,
    pub n_items: usize,
}

impl Prepared {
    pub fn new(data: &ResponseMatrix) -> Self {
        let mut groups: Vec<GroupObs> = (0..data.n_groups())
            .map(|_| GroupObs {
                persons: Vec::new(),
                offsets: vec![0],
                obs: Vec::new(),
            })
            .collect();
        let mut empty = 0;
        for p in 0..data.n_persons() {
            let g = &mut groups[data.group_of(p)];
            let before = g.obs.len();
            for (i, cell) in data.row(p).iter().enumerate() {
                if let Some(x) = cell {
                    g.obs.push((i as u32, *x));
                }
            }
            if g.obs.len() == before {
                empty += 1;
                continue;
            }
            g.persons.push(p);
            g.offsets.push(g.obs.len());
        }
        if empty > 0 {
            log::warn!("{empty} person(s) without any response are excluded from the likelihood");
        }
        Prepared {
            groups,
            n_items: data.n_items(),
        }
    }
}

/// Latent-trait values of the grid for one group.
pub(crate) fn group_nodes(quad: &Quadrature, dist: GroupDist) -> Vec<f64> {
    quad.nodes().iter().map(|x| dist.mean + dist.sd * x).collect()
}

/// Per-item log-probability tables `[item * Q + q]` for one group.
fn log_tables(state: &ModelState, group: usize, thetas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nq = thetas.len();
    let mut lp = vec![0.0; state.n_items() * nq];
    let mut lq = vec![0.0; state.n_items() * nq];
    for (j, row) in state.items.iter().enumerate() {
        let item = &row[group];
        for (q, &t) in thetas.iter().enumerate() {
            let (a, b) = item.log_probs(t);
            lp[j * nq + q] = a;
            lq[j * nq + q] = b;
        }
    }
    (lp, lq)
}

/// Expected counts for one group: `n[j*Q+q]` persons answering item `j` at
/// node `q`, `r[j*Q+q]` of whom answered correctly.
#[derive(Debug, Clone)]
pub(crate) struct GroupCounts {
    pub n: Vec<f64>,
    pub r: Vec<f64>,
    pub loglik: f64,
    pub thetas: Vec<f64>,
}

/// Log joint over nodes for one person, written into `ll`.
#[inline]
fn person_log_joint(obs: &[(u32, bool)], lp: &[f64], lq: &[f64], log_w: &[f64], ll: &mut [f64]) {
    let nq = ll.len();
    ll.copy_from_slice(log_w);
    for &(j, x) in obs {
        let table = if x { lp } else { lq };
        let row = &table[j as usize * nq..(j as usize + 1) * nq];
        for (l, t) in ll.iter_mut().zip(row) {
            *l += t;
        }
    }
}

/// Normalizes `ll` into posterior weights in place; returns the log marginal.
#[inline]
fn normalize(ll: &mut [f64]) -> f64 {
    let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in ll.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in ll.iter_mut() {
        *l /= sum;
    }
    max + sum.ln()
}

pub(crate) fn estep_group(
    prep: &Prepared,
    group: usize,
    state: &ModelState,
    quad: &Quadrature,
) -> GroupCounts {
    let nq = quad.len();
    let nj = prep.n_items;
    let thetas = group_nodes(quad, state.dists[group]);
    let (lp, lq) = log_tables(state, group, &thetas);
    let obs = &prep.groups[group];
    let n_chunks = obs.n_persons().div_ceil(CHUNK);

    let partials: Vec<(Vec<f64>, Vec<f64>, CompensatedSum)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut n = vec![0.0; nj * nq];
            let mut r = vec![0.0; nj * nq];
            let mut ll = vec![0.0; nq];
            let mut loglik = CompensatedSum::default();
            let end = ((c + 1) * CHUNK).min(obs.n_persons());
            for k in c * CHUNK..end {
                let po = obs.person_obs(k);
                person_log_joint(po, &lp, &lq, quad.log_weights(), &mut ll);
                loglik.add(normalize(&mut ll));
                for &(j, x) in po {
                    let base = j as usize * nq;
                    for (acc, w) in n[base..base + nq].iter_mut().zip(&ll) {
                        *acc += w;
                    }
                    if x {
                        for (acc, w) in r[base..base + nq].iter_mut().zip(&ll) {
                            *acc += w;
                        }
                    }
                }
            }
            (n, r, loglik)
        })
        .collect();

    let mut n = vec![0.0; nj * nq];
    let mut r = vec![0.0; nj * nq];
    let mut loglik = CompensatedSum::default();
    for (pn, pr, pl) in partials {
        for (a, b) in n.iter_mut().zip(&pn) {
            *a += b;
        }
        for (a, b) in r.iter_mut().zip(&pr) {
            *a += b;
        }
        loglik.add(pl.value());
    }
    GroupCounts {
        n,
        r,
        loglik: loglik.value(),
        thetas,
    }
}

/// Posterior weights over the group's nodes for one response row.
pub(crate) fn posterior(
    row: &[Option<bool>],
    group: usize,
    state: &ModelState,
    quad: &Quadrature,
) -> (Vec<f64>, Vec<f64>) {
    let thetas = group_nodes(quad, state.dists[group]);
    let mut ll = quad.log_weights().to_vec();
    for (j, cell) in row.iter().enumerate() {
        if let Some(x) = cell {
            let item = &state.items[j][group];
            for (l, &t) in ll.iter_mut().zip(&thetas) {
                let (a, b) = item.log_probs(t);
                *l += if *x { a } else { b };
            }
        }
    }
    normalize(&mut ll);
    (thetas, ll)
}

/// Per-node derivatives of `r ln P + (n - r) ln(1 - P)` with respect to the
/// linear predictor and the logit guess, with matching Fisher information.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NodeDerivs {
    pub value: f64,
    pub d_eta: f64,
    pub d_z: f64,
    pub i_eta_eta: f64,
    pub i_eta_z: f64,
    pub i_zz: f64,
}

#[inline]
pub(crate) fn node_derivs(item: &ItemParams, theta: f64, n: f64, r: f64) -> NodeDerivs {
    let eta = item.slope * theta + item.intercept;
    let s = sigmoid(eta);
    let (lp, lq) = item.log_probs(theta);
    let value = r * lp + (n - r) * lq;
    match item.logit_guess {
        None => NodeDerivs {
            value,
            d_eta: r - n * s,
            d_z: 0.0,
            i_eta_eta: n * s * (1.0 - s),
            i_eta_z: 0.0,
            i_zz: 0.0,
        },
        Some(z) => {
            let g = sigmoid(z);
            let p = g + (1.0 - g) * s;
            let resid = r - n * p;
            NodeDerivs {
                value,
                d_eta: resid * s / p,
                d_z: resid * g / p,
                i_eta_eta: n * (1.0 - g) * s * s * (1.0 - s) / p,
                i_eta_z: n * (1.0 - g) * s * (1.0 - s) * g / p,
                i_zz: n * (1.0 - s) * g * g * (1.0 - g) / p,
            }
        }
    }
}

/// Adds the gradient of the expected complete-data log-likelihood of one
/// group into `grad`, laid out by `layout`. The counts fix the posterior;
/// node positions follow `state`. When the counts come from `state` itself
/// this is the gradient of the marginal log-likelihood.
pub(crate) fn accumulate_group_gradient(
    counts: &GroupCounts,
    group: usize,
    state: &ModelState,
    layout: &ParamLayout,
    quad: &Quadrature,
    grad: &mut DVector<f64>,
) {
    let nq = quad.len();
    let dist_slots = layout.dist_params(group);
    let thetas = group_nodes(quad, state.dists[group]);
    let (mut d_mean, mut d_sd) = (0.0, 0.0);
    for (j, row) in state.items.iter().enumerate() {
        let item = &row[group];
        let slots = layout.item_slots(j, group);
        let (mut ga, mut gc, mut gz) = (0.0, 0.0, 0.0);
        for q in 0..nq {
            let n = counts.n[j * nq + q];
            if n == 0.0 {
                continue;
            }
            let t = thetas[q];
            let d = node_derivs(item, t, n, counts.r[j * nq + q]);
            ga += d.d_eta * t;
            gc += d.d_eta;
            gz += d.d_z;
            if dist_slots.is_some() {
                let dth = d.d_eta * item.slope;
                d_mean += dth;
                d_sd += dth * quad.nodes()[q];
            }
        }
        for (slot, g) in slots.iter().zip([ga, gc, gz]) {
            if let Some(k) = slot {
                grad[*k] += g;
            }
        }
    }
    if let Some((m, s)) = dist_slots {
        grad[m] += d_mean;
        grad[s] += d_sd;
    }
}
