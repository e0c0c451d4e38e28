//! Response data, item metadata and descriptive statistics.
//!
//! A [`ResponseMatrix`] is immutable once built: every constructor validates
//! the cell grid and group mapping, so downstream estimators can index freely.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic item response family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "2PL", alias = "2pl")]
    TwoPL,
    #[serde(rename = "3PL", alias = "3pl")]
    ThreePL,
}

impl ModelKind {
    /// Parameters per item per group: slope, intercept and (3PL) logit guessing.
    pub fn n_params(self) -> usize {
        match self {
            ModelKind::TwoPL => 2,
            ModelKind::ThreePL => 3,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::TwoPL => "2PL",
            ModelKind::ThreePL => "3PL",
        })
    }
}

/// Normal prior on the logit of the lower asymptote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuessPrior {
    pub mean: f64,
    pub sd: f64,
}

impl Default for GuessPrior {
    fn default() -> Self {
        GuessPrior { mean: -1.1, sd: 0.5 }
    }
}

impl GuessPrior {
    pub fn log_density(&self, z: f64) -> f64 {
        let u = (z - self.mean) / self.sd;
        -0.5 * u * u - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// First and second derivative of the log density in `z`.
    pub fn log_density_derivs(&self, z: f64) -> (f64, f64) {
        let v = self.sd * self.sd;
        (-(z - self.mean) / v, -1.0 / v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: String,
    pub model: ModelKind,
    pub guess_prior: Option<GuessPrior>,
}

impl ItemSpec {
    pub fn two_pl(id: impl Into<String>) -> Self {
        ItemSpec {
            id: id.into(),
            model: ModelKind::TwoPL,
            guess_prior: None,
        }
    }

    pub fn three_pl(id: impl Into<String>) -> Self {
        ItemSpec {
            id: id.into(),
            model: ModelKind::ThreePL,
            guess_prior: Some(GuessPrior::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.model, self.guess_prior) {
            (ModelKind::TwoPL, Some(_)) => Err(Error::Invalid(format!(
                "item {}: guessing prior given for a 2PL item",
                self.id
            ))),
            (_, Some(p)) if !(p.sd > 0.0) || !p.mean.is_finite() => Err(Error::Invalid(format!(
                "item {}: guessing prior sd must be positive",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ItemSpecFile {
    item: Vec<ItemSpecEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ItemSpecEntry {
    id: String,
    model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_sd: Option<f64>,
}

/// Parses an item-spec document: one `[[item]]` table per item with `id`,
/// `model` ("2PL" / "3PL") and optional `prior_mean` / `prior_sd`.
pub fn parse_item_specs(text: &str) -> Result<Vec<ItemSpec>> {
    let file: ItemSpecFile = toml::from_str(text)?;
    let mut specs = Vec::with_capacity(file.item.len());
    for entry in file.item {
        let guess_prior = match (entry.model, entry.prior_mean, entry.prior_sd) {
            (ModelKind::TwoPL, None, None) => None,
            (ModelKind::ThreePL, None, None) => Some(GuessPrior::default()),
            (_, mean, sd) => {
                let default = GuessPrior::default();
                Some(GuessPrior {
                    mean: mean.unwrap_or(default.mean),
                    sd: sd.unwrap_or(default.sd),
                })
            }
        };
        let spec = ItemSpec {
            id: entry.id,
            model: entry.model,
            guess_prior,
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn load_item_specs(path: &Path) -> Result<Vec<ItemSpec>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_item_specs(&std::fs::read_to_string(path)?)
}

pub fn item_specs_to_toml(specs: &[ItemSpec]) -> String {
    let file = ItemSpecFile {
        item: specs
            .iter()
            .map(|s| ItemSpecEntry {
                id: s.id.clone(),
                model: s.model,
                prior_mean: s.guess_prior.map(|p| p.mean),
                prior_sd: s.guess_prior.map(|p| p.sd),
            })
            .collect(),
    };
    toml::to_string(&file).expect("item specs serialize")
}

/// Persons by items dichotomous responses with group labels.
///
/// Group 0 is the reference group. Cells are `Some(true)` (correct),
/// `Some(false)` (incorrect) or `None` (missing).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    item_ids: Vec<String>,
    person_ids: Vec<String>,
    group_names: Vec<String>,
    group_of: Vec<usize>,
    cells: Vec<Option<bool>>,
}

impl ResponseMatrix {
    pub fn new(
        item_ids: Vec<String>,
        person_ids: Vec<String>,
        group_names: Vec<String>,
        group_of: Vec<usize>,
        cells: Vec<Option<bool>>,
    ) -> Result<Self> {
        let n = person_ids.len();
        let j = item_ids.len();
        if n == 0 || j == 0 {
            return Err(Error::Invalid("need at least one person and one item".into()));
        }
        if group_names.is_empty() {
            return Err(Error::Invalid("need at least one group".into()));
        }
        if group_of.len() != n || cells.len() != n * j {
            return Err(Error::Invalid("cell grid does not match dimensions".into()));
        }
        let mut counts = vec![0usize; group_names.len()];
        for &g in &group_of {
            if g >= group_names.len() {
                return Err(Error::Invalid(format!("group index {g} out of range")));
            }
            counts[g] += 1;
        }
        if let Some(g) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("group {} has no persons", group_names[g])));
        }
        Ok(ResponseMatrix {
            item_ids,
            person_ids,
            group_names,
            group_of,
            cells,
        })
    }

    pub fn n_persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn person_ids(&self) -> &[String] {
        &self.person_ids
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_of(&self, person: usize) -> usize {
        self.group_of[person]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    pub fn cell(&self, person: usize, item: usize) -> Option<bool> {
        self.cells[person * self.item_ids.len() + item]
    }

    pub fn row(&self, person: usize) -> &[Option<bool>] {
        let j = self.item_ids.len();
        &self.cells[person * j..(person + 1) * j]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_groups()];
        for &g in &self.group_of {
            counts[g] += 1;
        }
        counts
    }

    /// Person indices per group, in person order.
    pub fn persons_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups()];
        for (p, &g) in self.group_of.iter().enumerate() {
            out[g].push(p);
        }
        out
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == id)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|g| g == name)
    }

    /// Keeps only the listed groups, renumbered in the given order (the first
    /// entry becomes the reference group).
    pub fn select_groups(&self, groups: &[usize]) -> Result<ResponseMatrix> {
        let mut remap = vec![None; self.n_groups()];
        for (new, &old) in groups.iter().enumerate() {
            if old >= self.n_groups() || remap[old].is_some() {
                return Err(Error::Invalid(format!("bad group selection {groups:?}")));
            }
            remap[old] = Some(new);
        }
        let j = self.n_items();
        let mut person_ids = Vec::new();
        let mut group_of = Vec::new();
        let mut cells = Vec::new();
        for p in 0..self.n_persons() {
            if let Some(g) = remap[self.group_of[p]] {
                person_ids.push(self.person_ids[p].clone());
                group_of.push(g);
                cells.extend_from_slice(&self.cells[p * j..(p + 1) * j]);
            }
        }
        let names = groups.iter().map(|&g| self.group_names[g].clone()).collect();
        ResponseMatrix::new(self.item_ids.clone(), person_ids, names, group_of, cells)
    }

    /// Keeps only the listed items, in the given order.
    pub fn select_items(&self, items: &[usize]) -> Result<ResponseMatrix> {
        let mut cells = Vec::with_capacity(self.n_persons() * items.len());
        for p in 0..self.n_persons() {
            let row = self.row(p);
            cells.extend(items.iter().map(|&i| row[i]));
        }
        ResponseMatrix::new(
            items.iter().map(|&i| self.item_ids[i].clone()).collect(),
            self.person_ids.clone(),
            self.group_names.clone(),
            self.group_of.clone(),
            cells,
        )
    }
}

/// Column mapping and token rules for CSV ingestion.
#[derive(Debug, Clone)]
pub struct IngestLayout {
    pub group_column: String,
    /// Person identifier column; rows are numbered from 1 when absent.
    pub id_column: Option<String>,
    /// Item columns in order; every non-id, non-group column when `None`.
    pub item_columns: Option<Vec<String>>,
    pub missing_tokens: Vec<String>,
    /// Label placed at group index 0. Defaults to the first label seen.
    pub reference_group: Option<String>,
    /// Closed set of admissible labels; any other label is an error.
    pub allowed_groups: Option<Vec<String>>,
}

impl IngestLayout {
    pub fn new(group_column: impl Into<String>) -> Self {
        IngestLayout {
            group_column: group_column.into(),
            id_column: None,
            item_columns: None,
            missing_tokens: vec!["NA".into(), ".".into(), String::new()],
            reference_group: None,
            allowed_groups: None,
        }
    }

    pub fn with_id_column(mut self, column: impl Into<String>) -> Self {
        self.id_column = Some(column.into());
        self
    }

    pub fn with_reference(mut self, group: impl Into<String>) -> Self {
        self.reference_group = Some(group.into());
        self
    }

    pub fn with_missing_tokens<I, S>(mut self, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.missing_tokens = tokens.into_iter().map(Into::into).collect();
        self
    }
}

pub fn load_responses(path: &Path, layout: &IngestLayout) -> Result<ResponseMatrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_responses(File::open(path)?, layout)
}

pub fn read_responses<R: Read>(reader: R, layout: &IngestLayout) -> Result<ResponseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MalformedRow {
            line: 1,
            reason: format!("header has no column {name:?}"),
        })
    };
    let group_col = column(&layout.group_column)?;
    let id_col = layout.id_column.as_deref().map(column).transpose()?;
    let item_cols: Vec<usize> = match &layout.item_columns {
        Some(cols) => cols.iter().map(|c| column(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&c| c != group_col && Some(c) != id_col)
            .collect(),
    };
    if item_cols.is_empty() {
        return Err(Error::MalformedRow {
            line: 1,
            reason: "no item columns".into(),
        });
    }
    let item_ids: Vec<String> = item_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut group_names: Vec<String> = Vec::new();
    if let Some(reference) = &layout.reference_group {
        group_names.push(reference.clone());
    }
    let mut group_lookup: HashMap<String, usize> = group_names
        .iter()
        .enumerate()
        .map(|(i, g)| (g.clone(), i))
        .collect();

    let mut person_ids = Vec::new();
    let mut group_of = Vec::new();
    let mut cells = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(row_no + 2);
        let label = record.get(group_col).unwrap_or_default();
        if label.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty group label".into(),
            });
        }
        if let Some(allowed) = &layout.allowed_groups {
            if !allowed.iter().any(|a| a == label) {
                return Err(Error::UnknownGroupLabel(label.to_string()));
            }
        }
        let g = match group_lookup.get(label) {
            Some(&g) => g,
            None => {
                let g = group_names.len();
                group_names.push(label.to_string());
                group_lookup.insert(label.to_string(), g);
                g
            }
        };
        group_of.push(g);
        person_ids.push(match id_col {
            Some(c) => record[c].to_string(),
            None => (row_no + 1).to_string(),
        });
        for (&c, id) in item_cols.iter().zip(&item_ids) {
            let token = &record[c];
            let cell = match token {
                "0" => Some(false),
                "1" => Some(true),
                t if layout.missing_tokens.iter().any(|m| m == t) => None,
                t => {
                    return Err(Error::NonBinaryResponse {
                        line,
                        column: id.clone(),
                        token: t.to_string(),
                    })
                }
            };
            cells.push(cell);
        }
    }
    if person_ids.is_empty() {
        return Err(Error::MalformedRow {
            line: 2,
            reason: "no data rows".into(),
        });
    }
    if let Some(reference) = &layout.reference_group {
        if !group_of.contains(&0) {
            return Err(Error::UnknownGroupLabel(reference.clone()));
        }
    }
    ResponseMatrix::new(item_ids, person_ids, group_names, group_of, cells)
}

/// Writes `id,group,items...` with `missing_token` in missing cells.
pub fn write_responses<W: Write>(data: &ResponseMatrix, writer: W, missing_token: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["pid".to_string(), "group".to_string()];
    header.extend(data.item_ids.iter().cloned());
    wtr.write_record(&header)?;
    for p in 0..data.n_persons() {
        let mut rec = Vec::with_capacity(data.n_items() + 2);
        rec.push(data.person_ids[p].as_str());
        rec.push(data.group_names[data.group_of[p]].as_str());
        for cell in data.row(p) {
            rec.push(match cell {
                Some(true) => "1",
                Some(false) => "0",
                None => missing_token,
            });
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-item missing rate, proportion correct and rest-score point-biserial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDescriptives {
    pub item_id: String,
    pub missing_rate: f64,
    pub prop_correct: Option<f64>,
    pub point_biserial: Option<f64>,
    pub prop_correct_by_group: Vec<Option<f64>>,
    pub point_biserial_by_group: Vec<Option<f64>>,
    pub missing_rate_by_group: Vec<f64>,
}

pub fn describe_items(data: &ResponseMatrix) -> Vec<ItemDescriptives> {
    let n = data.n_persons();
    let g_count = data.n_groups();
    // Total correct per person over non-missing items.
    let totals: Vec<f64> = (0..n)
        .map(|p| data.row(p).iter().filter(|c| **c == Some(true)).count() as f64)
        .collect();
    let sizes = data.group_sizes();

    (0..data.n_items())
        .map(|item| {
            let mut missing = vec![0usize; g_count];
            let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); g_count];
            for p in 0..n {
                let g = data.group_of(p);
                match data.cell(p, item) {
                    None => missing[g] += 1,
                    Some(x) => {
                        let x = if x { 1.0 } else { 0.0 };
                        pairs[g].push((x, totals[p] - x));
                    }
                }
            }
            let prop = |v: &[(f64, f64)]| {
                (!v.is_empty()).then(|| v.iter().map(|(x, _)| x).sum::<f64>() / v.len() as f64)
            };
            let pooled: Vec<(f64, f64)> = pairs.iter().flatten().copied().collect();
            ItemDescriptives {
                item_id: data.item_ids[item].clone(),
                missing_rate: missing.iter().sum::<usize>() as f64 / n as f64,
                prop_correct: prop(&pooled),
                point_biserial: pearson(&pooled),
                prop_correct_by_group: pairs.iter().map(|v| prop(v)).collect(),
                point_biserial_by_group: pairs.iter().map(|v| pearson(v)).collect(),
                missing_rate_by_group: missing
                    .iter()
                    .zip(&sizes)
                    .map(|(&m, &s)| m as f64 / s as f64)
                    .collect(),
            }
        })
        .collect()
}

/// Pearson correlation; `None` when either margin has zero variance.
pub(crate) fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// How missing cells enter observed-score analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Missing cells are skipped; totals are prorated over answered items.
    IgnoreInLikelihood,
    /// Missing cells count as incorrect.
    #[default]
    ScoreAsIncorrect,
}

/// Observed-score view of a response matrix under a missing-data policy.
///
/// The IRT likelihood always skips missing cells; this view serves the
/// logistic procedure, which needs item responses and matching scores.
#[derive(Debug, Clone, Copy)]
pub struct ScoredView<'a> {
    data: &'a ResponseMatrix,
    policy: MissingPolicy,
}

pub fn split_scores_missing_policy(data: &ResponseMatrix, policy: MissingPolicy) -> ScoredView<'_> {
    ScoredView { data, policy }
}

impl<'a> ScoredView<'a> {
    pub fn data(&self) -> &'a ResponseMatrix {
        self.data
    }

    pub fn policy(&self) -> MissingPolicy {
        self.policy
    }

    pub fn response(&self, person: usize, item: usize) -> Option<bool> {
        match self.policy {
            MissingPolicy::IgnoreInLikelihood => self.data.cell(person, item),
            MissingPolicy::ScoreAsIncorrect => Some(self.data.cell(person, item).unwrap_or(false)),
        }
    }

    /// Total correct over `basis`. Under `IgnoreInLikelihood` the count is
    /// rescaled to the full basis length; `None` if nothing in the basis was
    /// answered.
    pub fn score(&self, person: usize, basis: &[usize]) -> Option<f64> {
        let row = self.data.row(person);
        match self.policy {
            MissingPolicy::ScoreAsIncorrect => {
                Some(basis.iter().filter(|&&i| row[i] == Some(true)).count() as f64)
            }
            MissingPolicy::IgnoreInLikelihood => {
                let (mut answered, mut correct) = (0usize, 0usize);
                for &i in basis {
                    if let Some(x) = row[i] {
                        answered += 1;
                        correct += x as usize;
                    }
                }
                (answered > 0).then(|| correct as f64 * basis.len() as f64 / answered as f64)
            }
        }
    }
}
