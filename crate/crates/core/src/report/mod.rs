//! Analysis orchestration and the canonical report document.

mod markdown;

pub use markdown::{coef_cell, render_descriptives, render_markdown, stars, stat_cell, ANCHOR_CELL};

use serde::{Deserialize, Serialize};

use crate::data::{describe_items, ItemDescriptives, ItemSpec, MissingPolicy, ModelKind, ResponseMatrix};
use crate::error::{Error, Result};
use crate::genlog::{purify_and_test, GenLogOptions, ItemOutcome, PurificationTrace};
use crate::irt::{default_grid, icc_table, FitResult, GroupDist, IccRow, ParamKind};
use crate::sim::SimMethod;
use crate::stats::{dim_screen, Adjustment, DimScreenResult, DEFAULT_RATIO_THRESHOLD};
use crate::wald::{run_wald_pipeline, AnchorChoice, WaldItemResult, WaldOptions, WaldStat};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub methods: Vec<SimMethod>,
    pub alpha: f64,
    /// Applied to the logistic procedure only.
    pub adjust: Adjustment,
    pub anchors: AnchorChoice,
    pub missing: MissingPolicy,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            methods: vec![SimMethod::Wald1Pipeline, SimMethod::GenLogistic],
            alpha: 0.05,
            adjust: Adjustment::Holm,
            anchors: AnchorChoice::Mp(1),
            missing: MissingPolicy::ScoreAsIncorrect,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the response and item files.
    pub input_digest: String,
    pub reference_group: String,
    pub groups: Vec<String>,
    pub n_persons: usize,
    pub n_items: usize,
    pub config: AnalysisConfig,
}

/// A test statistic with its raw and adjusted p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub statistic: f64,
    pub df: usize,
    pub p_raw: f64,
    pub adjustment: Adjustment,
    pub p_adjusted: f64,
}

impl From<WaldStat> for StatEntry {
    fn from(s: WaldStat) -> Self {
        StatEntry {
            statistic: s.q,
            df: s.df,
            p_raw: s.p,
            adjustment: Adjustment::None,
            p_adjusted: s.p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldItemReport {
    pub item_id: String,
    pub model: ModelKind,
    pub is_anchor: bool,
    pub all: Option<StatEntry>,
    pub nudif: Option<StatEntry>,
    pub udif: Option<StatEntry>,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub untestable: Option<String>,
}

/// Slope, difficulty and intercept of one item in one group, with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldParamRow {
    pub item_id: String,
    pub group: String,
    pub a: f64,
    pub a_se: Option<f64>,
    pub b: f64,
    pub b_se: Option<f64>,
    pub c: f64,
    pub c_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldSection {
    pub converged: bool,
    pub anchors: Vec<String>,
    /// Sweep mean p per item, when anchors were chosen by MP.
    pub anchor_mean_p: Vec<Option<f64>>,
    pub items: Vec<WaldItemReport>,
    pub dists: Vec<GroupDist>,
    pub parameters: Vec<WaldParamRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLogSection {
    pub converged: bool,
    pub alpha: f64,
    pub adjustment: Adjustment,
    pub items: Vec<ItemOutcome>,
    pub trace: PurificationTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimEntry {
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<DimScreenResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportError {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

impl ReportError {
    pub fn new(stage: &str, err: &Error) -> Self {
        ReportError {
            stage: stage.to_string(),
            kind: error_kind(err).to_string(),
            message: err.to_string(),
        }
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Step { source, .. } => error_kind(source),
        Error::MissingFile(_) => "missing_file",
        Error::Io(_) => "io",
        Error::MalformedRow { .. } => "malformed_row",
        Error::UnknownGroupLabel(_) => "unknown_group_label",
        Error::NonBinaryResponse { .. } => "non_binary_response",
        Error::Invalid(_) => "invalid",
        Error::DegenerateItem(_) => "degenerate_item",
        Error::NonConvergence { .. } => "non_convergence",
        Error::SingularInformation => "singular_information",
        Error::SingularContrastCovariance { .. } => "singular_contrast_covariance",
        Error::SeparationDetected { .. } => "separation",
        Error::IterationLimit(_) => "iteration_limit",
        Error::NestingViolation { .. } => "nesting_violation",
        Error::PurificationNonConvergence(_) => "purification_non_convergence",
        Error::DegenerateCorrelation => "degenerate_correlation",
        #[allow(unreachable_patterns)]
        _ => "other",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema: u32,
    pub metadata: Metadata,
    pub descriptives: Vec<ItemDescriptives>,
    pub dimensionality: Vec<DimEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genlog: Option<GenLogSection>,
    /// Curves of items flagged by both methods, from the anchored fit.
    pub icc: Vec<IccRow>,
    pub errors: Vec<ReportError>,
}

impl AnalysisReport {
    /// True when every requested method finished and converged.
    pub fn converged(&self) -> bool {
        self.wald.as_ref().is_none_or(|w| w.converged) && self.genlog.as_ref().is_none_or(|g| g.converged)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("report JSON: {e}")))
    }

    /// Item indices flagged by the anchored Wald test.
    pub fn wald_flagged(&self) -> Vec<usize> {
        self.wald
            .iter()
            .flat_map(|w| w.items.iter().enumerate().filter(|(_, r)| r.flagged).map(|(i, _)| i))
            .collect()
    }

    pub fn genlog_flagged(&self) -> Vec<usize> {
        self.genlog
            .iter()
            .flat_map(|g| g.items.iter().enumerate().filter(|(_, o)| o.flagged()).map(|(i, _)| i))
            .collect()
    }

    pub fn icc_csv(&self) -> String {
        let mut out = String::from("item_id,group,theta,p\n");
        for r in &self.icc {
            out.push_str(&format!("{},{},{:.4},{:.6}\n", r.item_id, r.group, r.theta, r.prob));
        }
        out
    }
}

/// Orders item specs to match the data columns.
pub fn align_specs(data: &ResponseMatrix, specs: &[ItemSpec]) -> Result<Vec<ItemSpec>> {
    let mut out = Vec::with_capacity(data.n_items());
    for id in data.item_ids() {
        let spec = specs
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Invalid(format!("item {id:?} has no model specification")))?;
        out.push(spec.clone());
    }
    if let Some(extra) = specs.iter().find(|s| data.item_index(&s.id).is_none()) {
        return Err(Error::Invalid(format!("item specification {:?} names no data column", extra.id)));
    }
    Ok(out)
}

fn wald_parameters(fit: &FitResult, items: &[usize], groups: &[String]) -> Vec<WaldParamRow> {
    let mut rows = Vec::new();
    for &j in items {
        for (g, name) in groups.iter().enumerate() {
            let p = fit.params(j, g);
            let (a, c) = (p.slope, p.intercept);
            let b = p.difficulty();
            let idx = |k| fit.layout.item_param(j, g, k);
            let cov = fit.covariance.as_ref();
            let b_se = match (cov, idx(ParamKind::Slope), idx(ParamKind::Intercept)) {
                (Some(v), Some(ia), Some(ic)) => {
                    // Delta method for b = -c / a.
                    let var = (v[(ic, ic)] + b * b * v[(ia, ia)] + 2.0 * b * v[(ia, ic)]) / (a * a);
                    Some(var.max(0.0).sqrt())
                }
                _ => None,
            };
            rows.push(WaldParamRow {
                item_id: fit.specs[j].id.clone(),
                group: name.clone(),
                a,
                a_se: fit.standard_error(j, g, ParamKind::Slope),
                b,
                b_se,
                c,
                c_se: fit.standard_error(j, g, ParamKind::Intercept),
                guess: (p.model() == ModelKind::ThreePL).then(|| p.guess()),
            });
        }
    }
    rows
}

fn wald_item(spec: &ItemSpec, r: &WaldItemResult, alpha: f64) -> WaldItemReport {
    WaldItemReport {
        item_id: r.item_id.clone(),
        model: spec.model,
        is_anchor: r.is_anchor,
        all: r.all.map(Into::into),
        nudif: r.nudif.map(Into::into),
        udif: r.udif.map(Into::into),
        flagged: r.flagged(alpha),
        untestable: r.untestable.clone(),
    }
}

fn dimensionality(data: &ResponseMatrix) -> Vec<DimEntry> {
    (0..data.n_groups())
        .map(|g| {
            let group = data.group_names()[g].clone();
            match dim_screen(data, g, DEFAULT_RATIO_THRESHOLD) {
                Ok(r) => DimEntry {
                    group,
                    result: Some(r),
                    error: None,
                },
                Err(e) => DimEntry {
                    group,
                    result: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn base_report(data: &ResponseMatrix, config: &AnalysisConfig, input_digest: &str) -> AnalysisReport {
    let groups = data.group_names().to_vec();
    AnalysisReport {
        schema: SCHEMA_VERSION,
        metadata: Metadata {
            tool: "difkit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            input_digest: input_digest.to_string(),
            reference_group: groups[0].clone(),
            groups,
            n_persons: data.n_persons(),
            n_items: data.n_items(),
            config: config.clone(),
        },
        descriptives: describe_items(data),
        dimensionality: dimensionality(data),
        wald: None,
        genlog: None,
        icc: Vec::new(),
        errors: Vec::new(),
    }
}

/// Descriptives and dimensionality screen only; no DIF methods run.
pub fn describe(data: &ResponseMatrix, input_digest: &str) -> AnalysisReport {
    let config = AnalysisConfig {
        methods: Vec::new(),
        ..AnalysisConfig::default()
    };
    base_report(data, &config, input_digest)
}

/// Result of [`analyze`]: the report plus whether every method converged.
#[derive(Debug, Clone)]
pub struct AnalysisOutcome {
    pub report: AnalysisReport,
    pub converged: bool,
}

/// Runs the configured methods and assembles the report. Validation problems
/// are returned as errors; estimation failures are recorded in the report.
pub fn analyze(
    data: &ResponseMatrix,
    specs: &[ItemSpec],
    config: &AnalysisConfig,
    input_digest: &str,
) -> Result<AnalysisOutcome> {
    if data.n_groups() < 2 {
        return Err(Error::Invalid("DIF analysis needs at least two groups".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1), got {}", config.alpha)));
    }
    if config.methods.is_empty() {
        return Err(Error::Invalid("no methods selected".into()));
    }
    let specs = align_specs(data, specs)?;
    for s in &specs {
        s.validate()?;
    }
    if let AnchorChoice::Fixed(ids) = &config.anchors {
        if let Some(bad) = ids.iter().find(|id| data.item_index(id).is_none()) {
            return Err(Error::Invalid(format!("unknown anchor item {bad:?}")));
        }
    }

    let groups = data.group_names().to_vec();
    let mut errors = Vec::new();
    let mut wald_fit = None;
    let wald = config.methods.contains(&SimMethod::Wald1Pipeline).then(|| {
        match run_wald_pipeline(data, &specs, &config.anchors, &WaldOptions::default()) {
            Ok(p) => {
                let items: Vec<WaldItemReport> = p
                    .wald1
                    .items
                    .iter()
                    .zip(&specs)
                    .map(|(r, s)| wald_item(s, r, config.alpha))
                    .collect();
                let flagged: Vec<usize> = (0..items.len()).filter(|&i| items[i].flagged).collect();
                let (dists, parameters) = match &p.wald1.fit {
                    Some(fit) => (fit.dists().to_vec(), wald_parameters(fit, &flagged, &groups)),
                    None => (Vec::new(), Vec::new()),
                };
                wald_fit = p.wald1.fit;
                WaldSection {
                    converged: true,
                    anchors: p.anchors.anchor_ids,
                    anchor_mean_p: p.anchors.mean_p,
                    items,
                    dists,
                    parameters,
                }
            }
            Err(e) => {
                errors.push(ReportError::new("wald", &e));
                WaldSection {
                    converged: false,
                    anchors: Vec::new(),
                    anchor_mean_p: Vec::new(),
                    items: Vec::new(),
                    dists: Vec::new(),
                    parameters: Vec::new(),
                }
            }
        }
    });

    let genlog = config.methods.contains(&SimMethod::GenLogistic).then(|| {
        let opts = GenLogOptions {
            alpha: config.alpha,
            adjust: config.adjust,
            missing: config.missing,
            ..GenLogOptions::default()
        };
        let (purification, converged) = match purify_and_test(data, &opts) {
            Ok(p) => (Some(p), true),
            Err(Error::PurificationNonConvergence(p)) => {
                errors.push(ReportError::new("genlog", &Error::PurificationNonConvergence(p.clone())));
                (Some(*p), false)
            }
            Err(e) => {
                errors.push(ReportError::new("genlog", &e));
                (None, false)
            }
        };
        let (items, trace) = match purification {
            Some(p) => (p.results, p.trace),
            None => (
                Vec::new(),
                PurificationTrace {
                    iterations: Vec::new(),
                    score_basis: Vec::new(),
                    converged: false,
                    cycle: false,
                },
            ),
        };
        GenLogSection {
            converged,
            alpha: config.alpha,
            adjustment: config.adjust,
            items,
            trace,
        }
    });

    let mut report = base_report(data, config, input_digest);
    report.wald = wald;
    report.genlog = genlog;
    report.errors = errors;
    if let Some(fit) = &wald_fit {
        let both: Vec<String> = report
            .wald_flagged()
            .into_iter()
            .filter(|i| report.genlog_flagged().contains(i))
            .map(|i| specs[i].id.clone())
            .collect();
        report.icc = icc_table(fit, &groups, &default_grid())
            .into_iter()
            .filter(|r| both.contains(&r.item_id))
            .collect();
    }
    let converged = report.converged();
    Ok(AnalysisOutcome { report, converged })
}
