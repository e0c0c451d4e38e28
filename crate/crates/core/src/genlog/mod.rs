//! Generalized logistic regression DIF with item purification.

mod logistic;

pub use logistic::{fit_logistic, lr_lambda, LogisticFit, LogisticModel, SEPARATION_LIMIT};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_scores_missing_policy, MissingPolicy, ResponseMatrix, ScoredView};
use crate::error::{Error, Result};
use crate::stats::{adjust, chisq_sf, Adjustment};

/// One likelihood-ratio test with its raw and adjusted p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTest {
    pub lambda: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub adjustment: Adjustment,
    pub flagged: bool,
}

impl LrTest {
    fn new(lambda: f64, df: usize, alpha: f64) -> Self {
        let p = chisq_sf(lambda, df);
        LrTest {
            lambda,
            df,
            p_raw: p,
            p_adjusted: p,
            adjustment: Adjustment::None,
            flagged: p < alpha,
        }
    }
}

/// Group-specific terms of the full model for one focal group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub group: usize,
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: f64,
    pub beta_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLogResult {
    pub item_id: String,
    pub n_persons: usize,
    pub all: LrTest,
    pub nudif: LrTest,
    pub udif: LrTest,
    /// The UDIF test assumes no nonuniform DIF; set when NUDIF is flagged.
    pub udif_conditional: bool,
    pub alpha: f64,
    pub beta: f64,
    pub focal: Vec<GroupCoefficients>,
    /// Log-likelihoods of the common, group-intercept and full models.
    pub logliks: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ItemOutcome {
    Tested(GenLogResult),
    Untestable { item_id: String, reason: String },
}

impl ItemOutcome {
    pub fn item_id(&self) -> &str {
        match self {
            ItemOutcome::Tested(r) => &r.item_id,
            ItemOutcome::Untestable { item_id, .. } => item_id,
        }
    }

    pub fn tested(&self) -> Option<&GenLogResult> {
        match self {
            ItemOutcome::Tested(r) => Some(r),
            ItemOutcome::Untestable { .. } => None,
        }
    }

    pub fn flagged(&self) -> bool {
        self.tested().is_some_and(|r| r.all.flagged)
    }
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        for x in v.iter_mut() {
            *x = (*x - mean) / sd;
        }
    }
}

/// Tests one item against the score over `basis` (the item itself is always
/// added). Flags use the raw p-values at `alpha`.
pub fn test_item(view: &ScoredView<'_>, item: usize, basis: &[usize], alpha: f64) -> Result<GenLogResult> {
    let data = view.data();
    let n_groups = data.n_groups();
    let mut own_basis = basis.to_vec();
    if !own_basis.contains(&item) {
        own_basis.push(item);
        own_basis.sort_unstable();
    }
    let (mut y, mut s, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..data.n_persons() {
        if let (Some(x), Some(score)) = (view.response(p, item), view.score(p, &own_basis)) {
            y.push(x);
            s.push(score);
            g.push(data.group_of(p));
        }
    }
    if y.is_empty() {
        return Err(Error::Invalid("no scored responses".into()));
    }
    standardize(&mut s);
    let common = fit_logistic(&y, &s, &g, n_groups, LogisticModel::CommonOnly)?;
    let inter = fit_logistic(&y, &s, &g, n_groups, LogisticModel::GroupInterceptsOnly)?;
    let full = fit_logistic(&y, &s, &g, n_groups, LogisticModel::Full)?;
    results_from_fits(&data.item_ids()[item], y.len(), &common, &inter, &full, alpha)
}

fn results_from_fits(
    item_id: &str,
    n_persons: usize,
    common: &LogisticFit,
    inter: &LogisticFit,
    full: &LogisticFit,
    alpha: f64,
) -> Result<GenLogResult> {
    let f = (full.coefficients.len() - 2) / 2;
    let nudif = lr_lambda(inter.loglik, full.loglik)?;
    let udif = lr_lambda(common.loglik, inter.loglik)?;
    let all = lr_lambda(common.loglik, full.loglik)?;
    let se = full.standard_errors();
    let focal = (1..=f)
        .map(|g| GroupCoefficients {
            group: g,
            alpha: full.coefficients[1 + g],
            alpha_se: se[1 + g],
            beta: full.coefficients[1 + f + g],
            beta_se: se[1 + f + g],
        })
        .collect();
    let nudif = LrTest::new(nudif, f, alpha);
    Ok(GenLogResult {
        item_id: item_id.to_string(),
        n_persons,
        all: LrTest::new(all, 2 * f, alpha),
        udif_conditional: nudif.flagged,
        nudif,
        udif: LrTest::new(udif, f, alpha),
        alpha: full.coefficients[0],
        beta: full.coefficients[1],
        focal,
        logliks: [common.loglik, inter.loglik, full.loglik],
    })
}

/// Adjusts each p-value family across the tested items and re-flags.
pub fn apply_adjustment(outcomes: &mut [ItemOutcome], method: Adjustment, alpha: f64) {
    let tested: Vec<usize> = (0..outcomes.len())
        .filter(|&i| outcomes[i].tested().is_some())
        .collect();
    type Pick = fn(&mut GenLogResult) -> &mut LrTest;
    let picks: [Pick; 3] = [|r| &mut r.all, |r| &mut r.nudif, |r| &mut r.udif];
    for pick in picks {
        let raw: Vec<f64> = tested
            .iter()
            .map(|&i| match &mut outcomes[i] {
                ItemOutcome::Tested(r) => pick(r).p_raw,
                ItemOutcome::Untestable { .. } => unreachable!(),
            })
            .collect();
        let adjusted = adjust(&raw, method);
        for (&i, p) in tested.iter().zip(adjusted) {
            if let ItemOutcome::Tested(r) = &mut outcomes[i] {
                let t = pick(r);
                t.p_adjusted = p;
                t.adjustment = method;
                t.flagged = p < alpha;
            }
        }
    }
    for o in outcomes.iter_mut() {
        if let ItemOutcome::Tested(r) = o {
            r.udif_conditional = r.nudif.flagged;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLogOptions {
    pub alpha: f64,
    pub adjust: Adjustment,
    pub max_iter: usize,
    pub missing: MissingPolicy,
}

impl Default for GenLogOptions {
    fn default() -> Self {
        GenLogOptions {
            alpha: 0.05,
            adjust: Adjustment::Holm,
            max_iter: 10,
            missing: MissingPolicy::ScoreAsIncorrect,
        }
    }
}

/// Flagged-item sets and score bases of each purification iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurificationTrace {
    /// Items flagged in each iteration.
    pub iterations: Vec<Vec<usize>>,
    /// Items summed into the matching score in each iteration.
    pub score_basis: Vec<Vec<usize>>,
    /// The last iteration reproduced the flags its score basis excluded.
    pub converged: bool,
    /// A flagged set repeated an earlier exclusion set.
    pub cycle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Purification {
    pub results: Vec<ItemOutcome>,
    pub trace: PurificationTrace,
}

impl Purification {
    pub fn flagged(&self) -> Vec<usize> {
        flagged_set(&self.results)
    }
}

fn flagged_set(results: &[ItemOutcome]) -> Vec<usize> {
    (0..results.len()).filter(|&i| results[i].flagged()).collect()
}

/// Purification loop around an arbitrary item tester.
///
/// `tester` receives the score basis and returns one outcome per item with
/// raw p-values; adjustment and flagging happen here.
pub fn purify_with<F>(n_items: usize, opts: &GenLogOptions, mut tester: F) -> Result<Purification>
where
    F: FnMut(&[usize]) -> Result<Vec<ItemOutcome>>,
{
    let mut excluded: Vec<usize> = Vec::new();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut trace = PurificationTrace {
        iterations: Vec::new(),
        score_basis: Vec::new(),
        converged: false,
        cycle: false,
    };
    let mut last = Vec::new();
    for _ in 0..opts.max_iter.max(1) {
        let basis: Vec<usize> = (0..n_items).filter(|i| !excluded.contains(i)).collect();
        let mut results = tester(&basis)?;
        if results.len() != n_items {
            return Err(Error::Invalid("tester returned the wrong number of items".into()));
        }
        apply_adjustment(&mut results, opts.adjust, opts.alpha);
        let flagged = flagged_set(&results);
        trace.iterations.push(flagged.clone());
        trace.score_basis.push(basis);
        last = results;
        if flagged == excluded {
            trace.converged = true;
            return Ok(Purification { results: last, trace });
        }
        // Nothing would be left to match on.
        if flagged.len() == n_items {
            break;
        }
        seen.push(std::mem::replace(&mut excluded, flagged));
        if seen.contains(&excluded) {
            trace.cycle = true;
            break;
        }
    }
    Err(Error::PurificationNonConvergence(Box::new(Purification {
        results: last,
        trace,
    })))
}

/// Tests every item, purifying the matching score until the flags settle.
pub fn purify_and_test(data: &ResponseMatrix, opts: &GenLogOptions) -> Result<Purification> {
    if data.n_groups() < 2 {
        return Err(Error::Invalid("DIF analysis needs at least two groups".into()));
    }
    let view = split_scores_missing_policy(data, opts.missing);
    purify_with(data.n_items(), opts, |basis| {
        Ok((0..data.n_items())
            .into_par_iter()
            .map(|i| match test_item(&view, i, basis, opts.alpha) {
                Ok(r) => ItemOutcome::Tested(r),
                Err(e) => ItemOutcome::Untestable {
                    item_id: data.item_ids()[i].clone(),
                    reason: e.to_string(),
                },
            })
            .collect())
    })
}

/// Group-specific coefficients of flagged items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub item_id: String,
    pub focal: Vec<GroupCoefficients>,
}

pub fn coefficients_table(results: &[ItemOutcome]) -> Vec<CoefficientRow> {
    results
        .iter()
        .filter(|o| o.flagged())
        .filter_map(ItemOutcome::tested)
        .map(|r| CoefficientRow {
            item_id: r.item_id.clone(),
            focal: r.focal.clone(),
        })
        .collect()
}
