//! Marginal maximum likelihood by EM over a fixed quadrature grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::estep::{accumulate_group_gradient, estep_group, node_derivs, GroupCounts, Prepared};
use super::params::{logit, GroupDist, ItemParams, ParamKind, SLOPE_FLOOR};
use super::plan::{ConstraintPlan, DistPlan, ModelState, ParamLabel, ParamLayout, Sharing};
use super::quadrature::Quadrature;
use crate::data::{ItemSpec, ModelKind, ResponseMatrix};
use crate::error::{Error, Result};
use crate::stats::CompensatedSum;

const SD_FLOOR: f64 = 1e-3;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Converged when the largest absolute parameter change in a cycle is below this.
    pub tol: f64,
    pub max_cycles: usize,
    pub quadrature: Quadrature,
    /// Newton iterations per item (and per distribution) in each M-step.
    pub mstep_iters: usize,
    /// Starting values; defaults are derived from the data when absent.
    pub start: Option<ModelState>,
    /// Squared-extrapolation acceleration of the EM map.
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-4,
            max_cycles: 500,
            quadrature: Quadrature::default(),
            mstep_iters: 3,
            start: None,
            accelerate: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub state: ModelState,
    pub specs: Vec<ItemSpec>,
    pub plan: ConstraintPlan,
    pub layout: ParamLayout,
    pub quadrature: Quadrature,
    /// Penalized marginal log-likelihood at `state`.
    pub loglik: f64,
    /// Penalized log-likelihood at every accepted iterate, then at the final state.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub cycles: usize,
    pub last_change: f64,
    /// Covariance of the packed free parameters, once computed.
    #[serde(skip)]
    pub covariance: Option<DMatrix<f64>>,
}

impl FitResult {
    pub fn params(&self, item: usize, group: usize) -> &ItemParams {
        &self.state.items[item][group]
    }

    pub fn dists(&self) -> &[GroupDist] {
        &self.state.dists
    }

    pub fn n_groups(&self) -> usize {
        self.state.n_groups()
    }

    pub fn n_items(&self) -> usize {
        self.state.n_items()
    }

    pub fn free_parameters(&self) -> DVector<f64> {
        self.layout.pack(&self.state)
    }

    /// Standard error of item parameter `kind` in `group`, when a covariance
    /// is attached and the parameter is free.
    pub fn standard_error(&self, item: usize, group: usize, kind: ParamKind) -> Option<f64> {
        let cov = self.covariance.as_ref()?;
        let k = self.layout.item_param(item, group, kind)?;
        Some(cov[(k, k)].max(0.0).sqrt())
    }
}

/// Fitting context shared by EM, gradients and covariance routines.
pub(crate) struct Model<'a> {
    pub prep: Prepared,
    pub specs: &'a [ItemSpec],
    pub layout: ParamLayout,
    pub quad: &'a Quadrature,
}

impl<'a> Model<'a> {
    pub fn new(
        data: &ResponseMatrix,
        specs: &'a [ItemSpec],
        plan: &ConstraintPlan,
        quad: &'a Quadrature,
    ) -> Result<Self> {
        check_inputs(data, specs, plan)?;
        Ok(Model {
            prep: Prepared::new(data),
            specs,
            layout: ParamLayout::new(specs, plan),
            quad,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.prep.groups.len()
    }

    pub fn estep(&self, state: &ModelState, group: usize) -> GroupCounts {
        estep_group(&self.prep, group, state, self.quad)
    }

    /// Log prior of every free logit-guess coordinate.
    pub fn penalty(&self, state: &ModelState) -> f64 {
        let mut total = 0.0;
        for label in self.layout.labels() {
            if let ParamLabel::Item {
                item,
                group,
                kind: ParamKind::Guess,
            } = *label
            {
                if let (Some(prior), Some(z)) = (
                    self.specs[item].guess_prior,
                    state.items[item][group.unwrap_or(0)].logit_guess,
                ) {
                    total += prior.log_density(z);
                }
            }
        }
        total
    }

    pub fn add_penalty_gradient(&self, state: &ModelState, grad: &mut DVector<f64>) {
        for (k, label) in self.layout.labels().iter().enumerate() {
            if let ParamLabel::Item {
                item,
                group,
                kind: ParamKind::Guess,
            } = *label
            {
                if let (Some(prior), Some(z)) = (
                    self.specs[item].guess_prior,
                    state.items[item][group.unwrap_or(0)].logit_guess,
                ) {
                    grad[k] += prior.log_density_derivs(z).0;
                }
            }
        }
    }

    pub fn loglik(&self, state: &ModelState) -> f64 {
        let marginal: CompensatedSum = (0..self.n_groups())
            .map(|g| self.estep(state, g).loglik)
            .collect();
        marginal.value() + self.penalty(state)
    }

    /// Unpenalized gradient contribution of one group.
    pub fn group_gradient(&self, state: &ModelState, group: usize) -> DVector<f64> {
        let counts = self.estep(state, group);
        let mut grad = DVector::zeros(self.layout.len());
        accumulate_group_gradient(&counts, group, state, &self.layout, self.quad, &mut grad);
        grad
    }

    pub fn gradient(&self, state: &ModelState) -> DVector<f64> {
        let mut grad = DVector::zeros(self.layout.len());
        for g in 0..self.n_groups() {
            grad += self.group_gradient(state, g);
        }
        self.add_penalty_gradient(state, &mut grad);
        grad
    }

    /// One EM cycle from `state` (the posterior is taken at `state`). Returns
    /// the penalized log-likelihood at the input state.
    pub fn em_cycle(&self, state: &mut ModelState, mstep_iters: usize) -> f64 {
        let counts: Vec<GroupCounts> = (0..self.n_groups()).map(|g| self.estep(state, g)).collect();
        let marginal: CompensatedSum = counts.iter().map(|c| c.loglik).collect();
        let loglik = marginal.value() + self.penalty(state);
        self.mstep_all(state, &counts, mstep_iters);
        loglik
    }

    /// Item M-steps followed by distribution M-steps, all under fixed `counts`.
    pub fn mstep_all(&self, state: &mut ModelState, counts: &[GroupCounts], iters: usize) {
        for item in 0..self.prep.n_items {
            self.mstep_item(item, state, counts, iters);
        }
        for g in 0..self.n_groups() {
            if self.layout.dist_params(g).is_some() {
                self.mstep_dist(g, state, &counts[g], iters);
            }
        }
    }

    /// Coordinates owned by `item`, with per-group local slots.
    fn item_locals(&self, item: usize) -> (Vec<usize>, Vec<[Option<usize>; 3]>) {
        let mut coords: Vec<usize> = Vec::new();
        let mut slots = Vec::with_capacity(self.n_groups());
        for g in 0..self.n_groups() {
            let mut local = [None; 3];
            for (s, slot) in self.layout.item_slots(item, g).iter().enumerate() {
                if let Some(k) = slot {
                    let pos = match coords.iter().position(|c| c == k) {
                        Some(p) => p,
                        None => {
                            coords.push(*k);
                            coords.len() - 1
                        }
                    };
                    local[s] = Some(pos);
                }
            }
            slots.push(local);
        }
        (coords, slots)
    }

    /// Expected complete-data objective of one item (with its prior), and
    /// optionally its gradient and Fisher information over the local coordinates.
    fn item_objective(
        &self,
        item: usize,
        state: &ModelState,
        counts: &[GroupCounts],
        coords: &[usize],
        slots: &[[Option<usize>; 3]],
        derivs: Option<(&mut DVector<f64>, &mut DMatrix<f64>)>,
    ) -> f64 {
        let nq = self.quad.len();
        let mut value = 0.0;
        let mut derivs = derivs;
        if let Some((g, h)) = derivs.as_mut() {
            g.fill(0.0);
            h.fill(0.0);
        }
        for (group, local) in slots.iter().enumerate() {
            let params = &state.items[item][group];
            let c = &counts[group];
            for q in 0..nq {
                let n = c.n[item * nq + q];
                if n == 0.0 {
                    continue;
                }
                let t = c.thetas[q];
                let d = node_derivs(params, t, n, c.r[item * nq + q]);
                value += d.value;
                if let Some((grad, info)) = derivs.as_mut() {
                    let gl = [d.d_eta * t, d.d_eta, d.d_z];
                    let il = [
                        [d.i_eta_eta * t * t, d.i_eta_eta * t, d.i_eta_z * t],
                        [d.i_eta_eta * t, d.i_eta_eta, d.i_eta_z],
                        [d.i_eta_z * t, d.i_eta_z, d.i_zz],
                    ];
                    for a in 0..3 {
                        let Some(la) = local[a] else { continue };
                        grad[la] += gl[a];
                        for b in 0..3 {
                            if let Some(lb) = local[b] {
                                info[(la, lb)] += il[a][b];
                            }
                        }
                    }
                }
            }
        }
        if let Some(prior) = self.specs[item].guess_prior {
            for (l, &k) in coords.iter().enumerate() {
                if let ParamLabel::Item {
                    kind: ParamKind::Guess,
                    group,
                    ..
                } = self.layout.labels()[k]
                {
                    let z = state.items[item][group.unwrap_or(0)]
                        .logit_guess
                        .expect("3PL item has a guess");
                    value += prior.log_density(z);
                    if let Some((grad, info)) = derivs.as_mut() {
                        let (d1, d2) = prior.log_density_derivs(z);
                        grad[l] += d1;
                        info[(l, l)] -= d2;
                    }
                }
            }
        }
        value
    }

    fn mstep_item(&self, item: usize, state: &mut ModelState, counts: &[GroupCounts], iters: usize) {
        let (coords, slots) = self.item_locals(item);
        let m = coords.len();
        let mut grad = DVector::zeros(m);
        let mut info = DMatrix::zeros(m, m);
        for _ in 0..iters {
            let current = self.item_objective(
                item,
                state,
                counts,
                &coords,
                &slots,
                Some((&mut grad, &mut info)),
            );
            let Some(step) = solve_spd(&info, &grad) else { return };
            let origin: Vec<f64> = coords.iter().map(|&k| self.coordinate(state, k)).collect();
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for (l, &k) in coords.iter().enumerate() {
                    let mut v = origin[l] + scale * step[l];
                    if self.is_slope(k) {
                        v = v.max(SLOPE_FLOOR);
                    }
                    self.layout.set_coordinate(k, v, state);
                }
                let trial = self.item_objective(item, state, counts, &coords, &slots, None);
                if trial >= current {
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                for (l, &k) in coords.iter().enumerate() {
                    self.layout.set_coordinate(k, origin[l], state);
                }
                return;
            }
            if step.amax() * scale < 1e-10 {
                return;
            }
        }
    }

    fn dist_objective(
        &self,
        group: usize,
        state: &ModelState,
        counts: &GroupCounts,
        dist: GroupDist,
        derivs: Option<(&mut [f64; 2], &mut [[f64; 2]; 2])>,
    ) -> f64 {
        let nq = self.quad.len();
        let mut value = 0.0;
        let mut derivs = derivs;
        if let Some((g, h)) = derivs.as_mut() {
            **g = [0.0; 2];
            **h = [[0.0; 2]; 2];
        }
        for (j, row) in state.items.iter().enumerate() {
            let params = &row[group];
            for (q, &x) in self.quad.nodes().iter().enumerate() {
                let n = counts.n[j * nq + q];
                if n == 0.0 {
                    continue;
                }
                let t = dist.mean + dist.sd * x;
                let d = node_derivs(params, t, n, counts.r[j * nq + q]);
                value += d.value;
                if let Some((grad, info)) = derivs.as_mut() {
                    let dt = d.d_eta * params.slope;
                    let it = d.i_eta_eta * params.slope * params.slope;
                    grad[0] += dt;
                    grad[1] += dt * x;
                    info[0][0] += it;
                    info[0][1] += it * x;
                    info[1][1] += it * x * x;
                }
            }
        }
        if let Some((_, info)) = derivs.as_mut() {
            info[1][0] = info[0][1];
        }
        value
    }

    fn mstep_dist(&self, group: usize, state: &mut ModelState, counts: &GroupCounts, iters: usize) {
        let mut grad = [0.0; 2];
        let mut info = [[0.0; 2]; 2];
        for _ in 0..iters {
            let dist = state.dists[group];
            let current =
                self.dist_objective(group, state, counts, dist, Some((&mut grad, &mut info)));
            let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
            if !(det > 0.0) || !(info[0][0] > 0.0) {
                return;
            }
            let step = [
                (info[1][1] * grad[0] - info[0][1] * grad[1]) / det,
                (info[0][0] * grad[1] - info[1][0] * grad[0]) / det,
            ];
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial = GroupDist::new(dist.mean + scale * step[0], dist.sd + scale * step[1]);
                if trial.sd > SD_FLOOR
                    && self.dist_objective(group, state, counts, trial, None) >= current
                {
                    accepted = Some(trial);
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some(d) => state.dists[group] = d,
                None => return,
            }
            if scale * step[0].abs().max(step[1].abs()) < 1e-10 {
                return;
            }
        }
    }

    /// Pulls slopes and standard deviations back above their floors.
    pub fn sanitize(&self, state: &mut ModelState) {
        for row in state.items.iter_mut() {
            for p in row.iter_mut() {
                if !(p.slope >= SLOPE_FLOOR) {
                    p.slope = SLOPE_FLOOR;
                }
            }
        }
        for d in state.dists.iter_mut() {
            if !(d.sd > 2.0 * SD_FLOOR) {
                d.sd = 2.0 * SD_FLOOR;
            }
        }
    }

    fn coordinate(&self, state: &ModelState, k: usize) -> f64 {
        match self.layout.labels()[k] {
            ParamLabel::Item { item, group, kind } => state.items[item][group.unwrap_or(0)]
                .get(kind)
                .expect("coordinate exists"),
            ParamLabel::Mean { group } => state.dists[group].mean,
            ParamLabel::Sd { group } => state.dists[group].sd,
        }
    }

    fn is_slope(&self, k: usize) -> bool {
        matches!(
            self.layout.labels()[k],
            ParamLabel::Item {
                kind: ParamKind::Slope,
                ..
            }
        )
    }

    pub fn start_state(&self, data: &ResponseMatrix, plan: &ConstraintPlan) -> ModelState {
        let items: Vec<ItemParams> = (0..data.n_items())
            .map(|j| {
                let (mut correct, mut answered) = (0usize, 0usize);
                for p in 0..data.n_persons() {
                    if let Some(x) = data.cell(p, j) {
                        answered += 1;
                        correct += x as usize;
                    }
                }
                let prop = correct as f64 / answered.max(1) as f64;
                let intercept = logit(prop).clamp(-3.0, 3.0);
                match self.specs[j].model {
                    ModelKind::TwoPL => ItemParams::two_pl(1.0, intercept),
                    ModelKind::ThreePL => ItemParams::three_pl(
                        1.0,
                        intercept,
                        self.specs[j].guess_prior.map_or(-1.1, |p| p.mean),
                    ),
                }
            })
            .collect();
        let scores = proportion_scores(data);
        let dists = plan
            .dists
            .iter()
            .enumerate()
            .map(|(g, d)| match d {
                DistPlan::Fixed(dist) => *dist,
                DistPlan::Estimate => {
                    let (m0, s0) = mean_sd(&scores[0]);
                    let (mg, _) = mean_sd(&scores[g]);
                    let mean = if s0 > 0.0 { (mg - m0) / s0 } else { 0.0 };
                    GroupDist::new(mean.clamp(-3.0, 3.0), 1.0)
                }
            })
            .collect();
        ModelState::shared(&items, dists)
    }
}

fn proportion_scores(data: &ResponseMatrix) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); data.n_groups()];
    for p in 0..data.n_persons() {
        let row = data.row(p);
        let answered = row.iter().filter(|c| c.is_some()).count();
        if answered > 0 {
            let correct = row.iter().filter(|c| **c == Some(true)).count();
            out[data.group_of(p)].push(correct as f64 / answered as f64);
        }
    }
    out
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Solves `info * x = grad` for symmetric positive definite `info`.
pub(crate) fn solve_spd(info: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(ch.solve(grad));
    }
    // Ridge for near-singular blocks (e.g. guessing far in the tail).
    let scale = info.diagonal().amax().max(1e-8);
    let ridged = info + DMatrix::identity(info.nrows(), info.ncols()) * (1e-6 * scale);
    ridged.cholesky().map(|ch| ch.solve(grad))
}

fn check_inputs(data: &ResponseMatrix, specs: &[ItemSpec], plan: &ConstraintPlan) -> Result<()> {
    if specs.len() != data.n_items() {
        return Err(Error::Invalid(format!(
            "{} item specs for {} items",
            specs.len(),
            data.n_items()
        )));
    }
    for (spec, id) in specs.iter().zip(data.item_ids()) {
        if &spec.id != id {
            return Err(Error::Invalid(format!(
                "item spec {:?} does not match data column {id:?}",
                spec.id
            )));
        }
        spec.validate()?;
    }
    plan.validate(specs)?;
    if plan.n_groups() != data.n_groups() {
        return Err(Error::Invalid(format!(
            "plan has {} groups, data has {}",
            plan.n_groups(),
            data.n_groups()
        )));
    }
    for (j, spec) in specs.iter().enumerate() {
        let per_group = plan.sharing(j, ParamKind::Intercept) == Sharing::FreePerGroup
            || plan.sharing(j, ParamKind::Slope) == Sharing::FreePerGroup;
        let mut seen = vec![[false; 2]; data.n_groups()];
        for p in 0..data.n_persons() {
            if let Some(x) = data.cell(p, j) {
                seen[data.group_of(p)][x as usize] = true;
            }
        }
        let degenerate = if per_group {
            seen.iter().any(|s| !(s[0] && s[1]))
        } else {
            !(seen.iter().any(|s| s[0]) && seen.iter().any(|s| s[1]))
        };
        if degenerate {
            return Err(Error::DegenerateItem(spec.id.clone()));
        }
    }
    Ok(())
}

/// Fits the multi-group model by EM under `plan`.
///
/// On hitting `max_cycles` the partial fit is returned inside
/// [`Error::NonConvergence`].
pub fn fit_mml_em(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    plan: &ConstraintPlan,
    opts: &FitOptions,
) -> Result<FitResult> {
    let model = Model::new(data, specs, plan, &opts.quadrature)?;
    let mut state = match &opts.start {
        Some(start) => {
            start.check_against(specs)?;
            if start.n_groups() != data.n_groups() {
                return Err(Error::Invalid("start state has the wrong group count".into()));
            }
            let mut s = start.clone();
            // Honour the plan: fixed distributions and shared values.
            for (g, d) in plan.dists.iter().enumerate() {
                if let DistPlan::Fixed(dist) = d {
                    s.dists[g] = *dist;
                }
            }
            let v = model.layout.pack(&s);
            model.layout.unpack(&v, &mut s);
            s
        }
        None => model.start_state(data, plan),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    let mut cycles = 0;
    let iters = opts.mstep_iters.max(1);
    // One plain EM map; records the penalized log-likelihood of its input.
    let map = |s: &mut ModelState, trace: &mut Vec<f64>, cycles: &mut usize| -> f64 {
        let before = model.layout.pack(s);
        let ll = model.em_cycle(s, iters);
        trace.push(ll);
        *cycles += 1;
        (&model.layout.pack(s) - before).amax()
    };
    while cycles < opts.max_cycles {
        let x0 = model.layout.pack(&state);
        last_change = map(&mut state, &mut trace, &mut cycles);
        if last_change < opts.tol || cycles >= opts.max_cycles {
            converged = last_change < opts.tol;
            break;
        }
        if !opts.accelerate {
            continue;
        }
        let x1 = model.layout.pack(&state);
        last_change = map(&mut state, &mut trace, &mut cycles);
        if last_change < opts.tol || cycles >= opts.max_cycles {
            converged = last_change < opts.tol;
            break;
        }
        let x2 = model.layout.pack(&state);
        // Squared extrapolation of the EM map, kept only if it does not
        // lose likelihood against the plain iterate.
        let r = &x1 - &x0;
        let v = &x2 - &x1 - &r;
        let v_norm = v.norm();
        if v_norm == 0.0 {
            continue;
        }
        let step = (-r.norm() / v_norm).min(-1.0);
        let jump = &x0 - &r * (2.0 * step) + &v * (step * step);
        let mut trial = state.clone();
        model.layout.unpack(&jump, &mut trial);
        model.sanitize(&mut trial);
        let l2 = model.loglik(&state);
        let mut scratch = Vec::new();
        let mut extra = 0;
        let mut moved = trial.clone();
        map(&mut moved, &mut scratch, &mut extra);
        if scratch[0].is_finite() && scratch[0] >= l2 {
            trace.push(l2);
            trace.push(scratch[0]);
            cycles += 1;
            last_change = (&model.layout.pack(&moved) - &x2).amax();
            state = moved;
        }
    }
    let loglik = model.loglik(&state);
    trace.push(loglik);

    let fit = FitResult {
        state,
        specs: specs.to_vec(),
        plan: plan.clone(),
        layout: model.layout,
        quadrature: opts.quadrature.clone(),
        loglik,
        loglik_trace: trace,
        converged,
        cycles,
        last_change,
        covariance: None,
    };
    if converged {
        Ok(fit)
    } else {
        Err(Error::NonConvergence {
            cycles,
            last_change,
            fit: Box::new(fit),
        })
    }
}

/// Marginal log-likelihood of `state` on the grid, missing cells skipped.
pub fn marginal_loglik(data: &ResponseMatrix, state: &ModelState, quad: &Quadrature) -> f64 {
    let prep = Prepared::new(data);
    let total: CompensatedSum = (0..data.n_groups())
        .map(|g| estep_group(&prep, g, state, quad).loglik)
        .collect();
    total.value()
}

/// Marginal log-likelihood plus the guessing priors of the free guess coordinates.
pub fn penalized_loglik(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    plan: &ConstraintPlan,
    state: &ModelState,
    quad: &Quadrature,
) -> Result<f64> {
    state.check_against(specs)?;
    Ok(Model::new(data, specs, plan, quad)?.loglik(state))
}

/// Analytic gradient of [`penalized_loglik`] over the packed free parameters.
pub fn loglik_gradient(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    plan: &ConstraintPlan,
    state: &ModelState,
    quad: &Quadrature,
) -> Result<DVector<f64>> {
    state.check_against(specs)?;
    Ok(Model::new(data, specs, plan, quad)?.gradient(state))
}
