//! Improved Wald test: two-step sweep, MP anchor selection, anchored test.

mod contrast;

pub use contrast::{build_contrasts, wald_q, ContrastMatrix, ContrastSubset, MAX_CONDITION};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ItemSpec, ResponseMatrix};
use crate::error::{Error, Result};
use crate::irt::{
    attach_covariance, fit_mml_em, ConstraintPlan, CovarianceMethod, FitOptions, FitResult,
    ModelState, ParamKind,
};
use crate::stats::chisq_sf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldStat {
    pub q: f64,
    pub df: usize,
    pub p: f64,
}

impl WaldStat {
    fn new(q: f64, df: usize) -> Self {
        WaldStat {
            q,
            df,
            p: chisq_sf(q, df),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldItemResult {
    pub item_id: String,
    pub is_anchor: bool,
    pub all: Option<WaldStat>,
    pub nudif: Option<WaldStat>,
    pub udif: Option<WaldStat>,
    /// Why the item could not be tested, if it was not an anchor.
    pub untestable: Option<String>,
}

impl WaldItemResult {
    fn anchor(item_id: &str) -> Self {
        WaldItemResult {
            item_id: item_id.to_string(),
            is_anchor: true,
            all: None,
            nudif: None,
            udif: None,
            untestable: None,
        }
    }

    /// Flagged when the raw p of the omnibus test is below `alpha`.
    pub fn flagged(&self, alpha: f64) -> bool {
        self.all.is_some_and(|s| s.p < alpha)
    }

    pub fn mean_p(&self) -> Option<f64> {
        Some((self.all?.p + self.nudif?.p + self.udif?.p) / 3.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaldOptions {
    pub fit: FitOptions,
    pub covariance: CovarianceMethod,
    /// Compare guessing parameters in the omnibus test of 3PL items.
    pub include_guess: bool,
}

impl Default for WaldOptions {
    fn default() -> Self {
        WaldOptions {
            fit: FitOptions::default(),
            covariance: CovarianceMethod::ObservedInfoFD,
            include_guess: true,
        }
    }
}

/// Stacked group-major estimates of `kinds` for one item, with their covariance.
/// `None` when some parameter is not free in every group.
pub fn item_block(fit: &FitResult, item: usize, kinds: &[ParamKind]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let cov = fit.covariance.as_ref()?;
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for g in 0..fit.n_groups() {
        for &kind in kinds {
            idx.push(fit.layout.item_param(item, g, kind)?);
            vals.push(fit.params(item, g).get(kind)?);
        }
    }
    let sigma = DMatrix::from_fn(idx.len(), idx.len(), |r, c| cov[(idx[r], idx[c])]);
    Some((DVector::from_vec(vals), sigma))
}

fn test_item(fit: &FitResult, item: usize, include_guess: bool) -> WaldItemResult {
    let spec = &fit.specs[item];
    let kinds: &[ParamKind] = if include_guess {
        ParamKind::for_model(spec.model)
    } else {
        &ParamKind::ALL[..2]
    };
    let untestable = |reason: String| WaldItemResult {
        item_id: spec.id.clone(),
        is_anchor: false,
        all: None,
        nudif: None,
        udif: None,
        untestable: Some(reason),
    };
    let Some((v, sigma)) = item_block(fit, item, kinds) else {
        return untestable("parameters are not free in every group".into());
    };
    let g = fit.n_groups();
    let k = kinds.len();
    let omnibus = if k == 3 {
        ContrastSubset::All
    } else {
        ContrastSubset::SlopesAndIntercepts
    };
    let stat = |subset| -> Result<WaldStat> {
        let c = build_contrasts(g, k, subset);
        let (q, df) = wald_q(&v, &sigma, &c.matrix)?;
        Ok(WaldStat::new(q, df))
    };
    match (
        stat(omnibus),
        stat(ContrastSubset::SlopesOnly),
        stat(ContrastSubset::InterceptsOnly),
    ) {
        (Ok(a), Ok(n), Ok(u)) => WaldItemResult {
            item_id: spec.id.clone(),
            is_anchor: false,
            all: Some(a),
            nudif: Some(n),
            udif: Some(u),
            untestable: None,
        },
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => untestable(e.to_string()),
    }
}

fn check_groups(data: &ResponseMatrix) -> Result<()> {
    if data.n_groups() < 2 {
        return Err(Error::Invalid("DIF analysis needs at least two groups".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Wald2Output {
    pub step1: FitResult,
    pub step2: FitResult,
    pub items: Vec<WaldItemResult>,
}

/// Two-step sweep. Group 0 of `data` is the reference group.
///
/// Step 1 constrains every item equal and estimates the focal distributions;
/// step 2 frees every item with the distributions fixed at step-1 values.
pub fn run_wald2(data: &ResponseMatrix, specs: &[ItemSpec], opts: &WaldOptions) -> Result<Wald2Output> {
    check_groups(data)?;
    let n_items = specs.len();
    let plan1 = ConstraintPlan::all_equal(n_items, data.n_groups());
    let step1 = fit_mml_em(data, specs, &plan1, &opts.fit).map_err(|e| e.in_step("wald-2 step 1"))?;

    let plan2 = ConstraintPlan::all_free(n_items, step1.dists());
    let fit2 = FitOptions {
        start: Some(step1.state.clone()),
        ..opts.fit.clone()
    };
    let mut step2 = fit_mml_em(data, specs, &plan2, &fit2).map_err(|e| e.in_step("wald-2 step 2"))?;
    attach_covariance(data, &mut step2, opts.covariance).map_err(|e| e.in_step("wald-2 step 2"))?;
    let items = (0..n_items)
        .map(|j| test_item(&step2, j, opts.include_guess))
        .collect();
    Ok(Wald2Output { step1, step2, items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSelection {
    pub anchors: Vec<usize>,
    pub anchor_ids: Vec<String>,
    /// Mean of the three sweep p-values per item; `None` for untestable items.
    pub mean_p: Vec<Option<f64>>,
}

/// Picks the `n_anchors` items with the highest mean sweep p-value. Ties go to
/// the smaller omnibus Q, then to the earlier item.
pub fn select_anchor_mp(wald2: &[WaldItemResult], n_anchors: usize) -> Result<AnchorSelection> {
    if n_anchors == 0 || n_anchors >= wald2.len() {
        return Err(Error::Invalid(format!(
            "cannot choose {n_anchors} anchor(s) from {} items",
            wald2.len()
        )));
    }
    let mean_p: Vec<Option<f64>> = wald2.iter().map(WaldItemResult::mean_p).collect();
    let mut order: Vec<usize> = (0..wald2.len()).filter(|&i| mean_p[i].is_some()).collect();
    if order.len() < n_anchors {
        return Err(Error::Invalid("too few testable items to choose anchors".into()));
    }
    let q = |i: usize| wald2[i].all.map_or(f64::INFINITY, |s| s.q);
    order.sort_by(|&a, &b| {
        mean_p[b]
            .unwrap()
            .total_cmp(&mean_p[a].unwrap())
            .then(q(a).total_cmp(&q(b)))
            .then(a.cmp(&b))
    });
    let mut anchors: Vec<usize> = order[..n_anchors].to_vec();
    anchors.sort_unstable();
    Ok(AnchorSelection {
        anchor_ids: anchors.iter().map(|&i| wald2[i].item_id.clone()).collect(),
        anchors,
        mean_p,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Wald1Output {
    pub fit: Option<FitResult>,
    pub items: Vec<WaldItemResult>,
}

/// Anchored single-model test. Anchors are constrained equal, every other
/// item is free per group, and focal distributions are estimated.
pub fn run_wald1(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    anchors: &[usize],
    start: Option<&ModelState>,
    opts: &WaldOptions,
) -> Result<Wald1Output> {
    check_groups(data)?;
    if anchors.is_empty() {
        return Err(Error::Invalid("the anchored test needs at least one anchor".into()));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= specs.len()) {
        return Err(Error::Invalid(format!("anchor index {bad} out of range")));
    }
    if anchors.len() == specs.len() {
        return Ok(Wald1Output {
            fit: None,
            items: Vec::new(),
        });
    }
    let plan = ConstraintPlan::anchored(specs.len(), data.n_groups(), anchors);
    let fit_opts = FitOptions {
        start: start.cloned(),
        ..opts.fit.clone()
    };
    let mut fit = fit_mml_em(data, specs, &plan, &fit_opts).map_err(|e| e.in_step("wald-1"))?;
    attach_covariance(data, &mut fit, opts.covariance).map_err(|e| e.in_step("wald-1"))?;
    let items = (0..specs.len())
        .map(|j| {
            if anchors.contains(&j) {
                WaldItemResult::anchor(&specs[j].id)
            } else {
                test_item(&fit, j, opts.include_guess)
            }
        })
        .collect();
    Ok(Wald1Output {
        fit: Some(fit),
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorChoice {
    /// Highest mean sweep p-value, this many anchors.
    Mp(usize),
    /// Anchors named by item id.
    Fixed(Vec<String>),
}

impl Default for AnchorChoice {
    fn default() -> Self {
        AnchorChoice::Mp(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaldPipeline {
    pub wald2: Option<Wald2Output>,
    pub anchors: AnchorSelection,
    pub wald1: Wald1Output,
}

impl WaldPipeline {
    pub fn flagged(&self, alpha: f64) -> Vec<usize> {
        (0..self.wald1.items.len())
            .filter(|&i| self.wald1.items[i].flagged(alpha))
            .collect()
    }
}

/// Sweep, anchor selection and anchored test in sequence.
pub fn run_wald_pipeline(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    anchors: &AnchorChoice,
    opts: &WaldOptions,
) -> Result<WaldPipeline> {
    match anchors {
        AnchorChoice::Mp(n) => {
            let wald2 = run_wald2(data, specs, opts)?;
            let selection = select_anchor_mp(&wald2.items, *n)?;
            let wald1 = run_wald1(data, specs, &selection.anchors, Some(&wald2.step1.state), opts)?;
            Ok(WaldPipeline {
                wald2: Some(wald2),
                anchors: selection,
                wald1,
            })
        }
        AnchorChoice::Fixed(ids) => {
            let mut idx = Vec::new();
            for id in ids {
                let i = specs
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::Invalid(format!("unknown anchor item {id:?}")))?;
                if !idx.contains(&i) {
                    idx.push(i);
                }
            }
            idx.sort_unstable();
            let wald1 = run_wald1(data, specs, &idx, None, opts)?;
            Ok(WaldPipeline {
                wald2: None,
                anchors: AnchorSelection {
                    anchor_ids: idx.iter().map(|&i| specs[i].id.clone()).collect(),
                    anchors: idx,
                    mean_p: Vec::new(),
                },
                wald1,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, q: f64, p: [f64; 3]) -> WaldItemResult {
        let s = |p| Some(WaldStat { q, df: 2, p });
        WaldItemResult {
            item_id: id.into(),
            is_anchor: false,
            all: s(p[0]),
            nudif: s(p[1]),
            udif: s(p[2]),
            untestable: None,
        }
    }

    #[test]
    fn highest_mean_p_wins() {
        let items = vec![
            item("A", 3.0, [0.2, 0.3, 0.4]),
            item("B", 0.1, [1.0, 1.0, 1.0]),
            item("C", 1.0, [0.9, 0.5, 0.6]),
        ];
        let sel = select_anchor_mp(&items, 1).unwrap();
        assert_eq!(sel.anchor_ids, vec!["B".to_string()]);
    }

    #[test]
    fn tie_goes_to_smaller_q() {
        let items = vec![
            item("A", 3.0, [0.6, 0.6, 0.6]),
            item("B", 1.0, [0.6, 0.6, 0.6]),
            item("C", 1.0, [0.6, 0.6, 0.6]),
        ];
        let sel = select_anchor_mp(&items, 1).unwrap();
        assert_eq!(sel.anchors, vec![1]);
    }

    #[test]
    fn too_many_anchors_rejected() {
        let items = vec![item("A", 1.0, [0.5; 3])];
        assert!(select_anchor_mp(&items, 1).is_err());
    }
}
