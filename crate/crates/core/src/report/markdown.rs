use std::fmt::Write;

use super::{AnalysisReport, StatEntry, WaldParamRow};
use crate::genlog::ItemOutcome;

/// Cell for an anchor item in the Wald table.
pub const ANCHOR_CELL: &str = ".";
const MISSING_CELL: &str = "NA";

/// Two stars below `alpha / 5`, one below `alpha`, strict inequalities.
/// At the conventional 0.05 this is the usual `p < .05` / `p < .01` note.
pub fn stars(p: f64, alpha: f64) -> &'static str {
    if p < alpha / 5.0 {
        "**"
    } else if p < alpha {
        "*"
    } else {
        ""
    }
}

fn fixed2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn stat_cell(statistic: f64, p: f64, alpha: f64) -> String {
    format!("{}{}", fixed2(statistic), stars(p, alpha))
}

pub fn coef_cell(estimate: f64, se: Option<f64>) -> String {
    match se {
        Some(se) => format!("{} ({})", fixed2(estimate), fixed2(se)),
        None => fixed2(estimate),
    }
}

fn opt2(x: Option<f64>) -> String {
    x.map(fixed2).unwrap_or_else(|| MISSING_CELL.into())
}

fn row(out: &mut String, cells: &[String]) {
    let _ = writeln!(out, "| {} |", cells.join(" | "));
}

fn header(out: &mut String, cells: &[String]) {
    row(out, cells);
    row(out, &vec!["---".to_string(); cells.len()]);
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn wald_cell(s: Option<StatEntry>, anchor: bool, alpha: f64) -> String {
    match s {
        _ if anchor => ANCHOR_CELL.into(),
        Some(s) => stat_cell(s.statistic, s.p_raw, alpha),
        None => MISSING_CELL.into(),
    }
}

fn descriptives(out: &mut String, r: &AnalysisReport) {
    let groups = &r.metadata.groups;
    let _ = writeln!(out, "## Item statistics by group\n");
    let mut head = strs(&["#", "Item", "Model", "% Missing", "All r", "All p"]);
    for g in groups {
        head.push(format!("{g} r"));
        head.push(format!("{g} p"));
    }
    header(out, &head);
    let models: Vec<String> = r
        .wald
        .as_ref()
        .filter(|w| !w.items.is_empty())
        .map(|w| w.items.iter().map(|i| i.model.to_string()).collect())
        .unwrap_or_default();
    for (i, d) in r.descriptives.iter().enumerate() {
        let mut cells = vec![
            (i + 1).to_string(),
            d.item_id.clone(),
            models.get(i).cloned().unwrap_or_default(),
            format!("{:.1}%", 100.0 * d.missing_rate),
            opt2(d.point_biserial),
            opt2(d.prop_correct),
        ];
        for g in 0..groups.len() {
            cells.push(opt2(d.point_biserial_by_group[g]));
            cells.push(opt2(d.prop_correct_by_group[g]));
        }
        row(out, &cells);
    }
    out.push('\n');
}

fn dimensionality(out: &mut String, r: &AnalysisReport) {
    let _ = writeln!(out, "## Dimensionality screen\n");
    header(out, &strs(&["Group", "λ1", "λ2", "λ1/λ2", "Unidimensional"]));
    for d in &r.dimensionality {
        let cells = match &d.result {
            Some(res) => vec![
                d.group.clone(),
                opt2(res.eigenvalues.first().copied()),
                opt2(res.eigenvalues.get(1).copied()),
                opt2(res.ratio_1_2),
                if res.unidimensional { "yes" } else { "no" }.into(),
            ],
            None => vec![d.group.clone(), MISSING_CELL.into(), MISSING_CELL.into(), MISSING_CELL.into(), d.error.clone().unwrap_or_default()],
        };
        row(out, &cells);
    }
    out.push('\n');
}

fn dif_table(out: &mut String, r: &AnalysisReport) {
    let alpha = r.metadata.config.alpha;
    let _ = writeln!(out, "## DIF statistics ({} groups)\n", r.metadata.groups.len());
    let mut head = strs(&["Item", "Model"]);
    if r.wald.is_some() {
        head.extend(strs(&["Wald-1 All", "Wald-1 NUDIF", "Wald-1 UDIF"]));
    }
    if r.genlog.is_some() {
        head.extend(strs(&["GenLog All", "GenLog NUDIF", "GenLog UDIF"]));
    }
    header(out, &head);
    for (i, d) in r.descriptives.iter().enumerate() {
        let wald = r.wald.as_ref().and_then(|w| w.items.get(i));
        let model = wald.map(|w| w.model.to_string()).unwrap_or_default();
        let mut cells = vec![d.item_id.clone(), model];
        if let Some(w) = &r.wald {
            match w.items.get(i) {
                Some(it) => {
                    cells.push(wald_cell(it.all, it.is_anchor, alpha));
                    cells.push(wald_cell(it.nudif, it.is_anchor, alpha));
                    cells.push(wald_cell(it.udif, it.is_anchor, alpha));
                }
                None => cells.extend(vec![MISSING_CELL.to_string(); 3]),
            }
        }
        if let Some(g) = &r.genlog {
            match g.items.get(i).and_then(ItemOutcome::tested) {
                Some(t) => {
                    for s in [&t.all, &t.nudif, &t.udif] {
                        cells.push(stat_cell(s.lambda, s.p_adjusted, alpha));
                    }
                }
                None => cells.extend(vec![MISSING_CELL.to_string(); 3]),
            }
        }
        row(out, &cells);
    }
    let _ = writeln!(
        out,
        "\nNote. * p < {}; ** p < {}. Wald cells use raw p; logistic cells use {}-adjusted p. \"{}\" marks anchor items.\n",
        alpha,
        alpha / 5.0,
        r.genlog.as_ref().map(|g| g.adjustment.to_string()).unwrap_or_else(|| "none".into()),
        ANCHOR_CELL
    );
    if let Some(w) = &r.wald {
        if !w.anchors.is_empty() {
            let _ = writeln!(out, "Anchor items: {}\n", w.anchors.join(", "));
        }
    }
    if let Some(g) = &r.genlog {
        let _ = writeln!(
            out,
            "Purification: {} iteration(s), {}.\n",
            g.trace.iterations.len(),
            if g.converged { "converged" } else { "did not converge" }
        );
    }
}

fn wald_params(out: &mut String, r: &AnalysisReport) {
    let Some(w) = &r.wald else { return };
    let groups = &r.metadata.groups;
    let _ = writeln!(out, "## Item parameters of Wald-1 DIF items\n");
    if w.parameters.is_empty() {
        let _ = writeln!(out, "No items flagged.\n");
        return;
    }
    let mut items: Vec<&str> = Vec::new();
    for p in &w.parameters {
        if !items.contains(&p.item_id.as_str()) {
            items.push(&p.item_id);
        }
    }
    type Getter = fn(&WaldParamRow) -> (f64, Option<f64>);
    let blocks: [(&str, Getter); 3] = [
        ("a", |p| (p.a, p.a_se)),
        ("b", |p| (p.b, p.b_se)),
        ("c", |p| (p.c, p.c_se)),
    ];
    let mut head = strs(&["Item"]);
    head.extend((1..=groups.len()).map(|g| format!("g{g}")));
    header(out, &head);
    for (name, get) in blocks {
        let mut sub = vec![String::new()];
        sub.extend((1..=groups.len()).map(|g| format!("{name}{g}")));
        row(out, &sub);
        for id in &items {
            let mut cells = vec![id.to_string()];
            for p in w.parameters.iter().filter(|p| p.item_id == *id) {
                let (est, se) = get(p);
                cells.push(coef_cell(est, se));
            }
            row(out, &cells);
        }
    }
    let _ = writeln!(out, "\nGroups: {}. c is the intercept (b = -c/a).\n", groups.join(", "));
}

fn genlog_params(out: &mut String, r: &AnalysisReport) {
    let Some(g) = &r.genlog else { return };
    let focal = &r.metadata.groups[1..];
    let _ = writeln!(out, "## Group-specific coefficients of logistic DIF items\n");
    let flagged: Vec<_> = g.items.iter().filter(|o| o.flagged()).filter_map(ItemOutcome::tested).collect();
    if flagged.is_empty() {
        let _ = writeln!(out, "No items flagged.\n");
        return;
    }
    let mut head = strs(&["Item"]);
    head.extend((1..=focal.len()).map(|k| format!("α_{k}")));
    head.extend((1..=focal.len()).map(|k| format!("β_{k}")));
    header(out, &head);
    for t in flagged {
        let mut cells = vec![t.item_id.clone()];
        cells.extend(t.focal.iter().map(|c| coef_cell(c.alpha, Some(c.alpha_se))));
        cells.extend(t.focal.iter().map(|c| coef_cell(c.beta, Some(c.beta_se))));
        row(out, &cells);
    }
    let _ = writeln!(out, "\nFocal groups: {}.\n", focal.join(", "));
}

/// Item statistics and the dimensionality screen only.
pub fn render_descriptives(r: &AnalysisReport) -> String {
    let mut out = String::new();
    descriptives(&mut out, r);
    dimensionality(&mut out, r);
    out
}

/// Deterministic markdown rendering of the report tables.
pub fn render_markdown(r: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# DIF analysis report\n");
    let _ = writeln!(
        out,
        "Reference group: {}. Groups: {}. Persons: {}. Items: {}. Input digest: `{}`.\n",
        r.metadata.reference_group,
        r.metadata.groups.join(", "),
        r.metadata.n_persons,
        r.metadata.n_items,
        r.metadata.input_digest
    );
    descriptives(&mut out, r);
    dimensionality(&mut out, r);
    dif_table(&mut out, r);
    wald_params(&mut out, r);
    genlog_params(&mut out, r);
    if !r.errors.is_empty() {
        let _ = writeln!(out, "## Errors\n");
        for e in &r.errors {
            let _ = writeln!(out, "- {} ({}): {}", e.stage, e.kind, e.message);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_follow_table_conventions() {
        assert_eq!(stat_cell(18.65, 0.0048, 0.05), "18.65**");
        assert_eq!(stat_cell(8.2, 0.0166, 0.05), "8.20*");
        assert_eq!(stat_cell(9.4, 0.05, 0.05), "9.40");
        assert_eq!(stat_cell(9.4, 0.01, 0.05), "9.40*");
        assert_eq!(coef_cell(1.04, Some(0.22)), "1.04 (0.22)");
        assert_eq!(coef_cell(-0.001, Some(0.07)), "0.00 (0.07)");
        assert_eq!(wald_cell(None, true, 0.05), ".");
    }
}
