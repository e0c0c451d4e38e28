//! Multiplicity adjustments for families of p-values.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    None,
    #[default]
    Holm,
    #[serde(rename = "bh")]
    BH,
}

impl std::str::FromStr for Adjustment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Adjustment::None),
            "holm" => Ok(Adjustment::Holm),
            "bh" | "fdr" => Ok(Adjustment::BH),
            other => Err(format!("unknown adjustment {other:?} (expected holm, bh or none)")),
        }
    }
}

impl std::fmt::Display for Adjustment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Adjustment::None => "none",
            Adjustment::Holm => "holm",
            Adjustment::BH => "bh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueFamily {
    pub raw: Vec<f64>,
    pub method: Adjustment,
    pub adjusted: Vec<f64>,
}

impl PValueFamily {
    pub fn new(raw: Vec<f64>, method: Adjustment) -> Self {
        let adjusted = adjust(&raw, method);
        PValueFamily { raw, method, adjusted }
    }
}

pub fn adjust(raw: &[f64], method: Adjustment) -> Vec<f64> {
    match method {
        Adjustment::None => raw.to_vec(),
        Adjustment::Holm => holm_adjust(raw),
        Adjustment::BH => bh_adjust(raw),
    }
}

/// Ascending order of p-values; ties keep input order.
fn ascending(raw: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
    order
}

/// Holm step-down adjustment.
pub fn holm_adjust(raw: &[f64]) -> Vec<f64> {
    let m = raw.len();
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in ascending(raw).iter().enumerate() {
        running = running.max(raw[i] * (m - rank) as f64);
        out[i] = running.min(1.0);
    }
    out
}

/// Benjamini-Hochberg step-up adjustment.
pub fn bh_adjust(raw: &[f64]) -> Vec<f64> {
    let m = raw.len();
    let mut out = vec![0.0; m];
    let mut running = f64::INFINITY;
    let order = ascending(raw);
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(raw[i] * m as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn singleton_family_is_unchanged() {
        assert_eq!(holm_adjust(&[0.03]), vec![0.03]);
        assert_eq!(bh_adjust(&[0.03]), vec![0.03]);
    }

    #[test]
    fn worked_families() {
        close(&holm_adjust(&[0.01, 0.02, 0.03]), &[0.03, 0.04, 0.04]);
        close(&bh_adjust(&[0.01, 0.02, 0.09]), &[0.03, 0.03, 0.09]);
        close(&holm_adjust(&[0.03, 0.01, 0.02]), &[0.04, 0.03, 0.04]);
        assert_eq!(holm_adjust(&[1.0, 1.0]), vec![1.0, 1.0]);
        assert_eq!(bh_adjust(&[1.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn parse_names() {
        assert_eq!("BH".parse::<Adjustment>().unwrap(), Adjustment::BH);
        assert_eq!("holm".parse::<Adjustment>().unwrap(), Adjustment::Holm);
        assert!("bonferroni".parse::<Adjustment>().is_err());
    }

    proptest! {
        #[test]
        fn holm_dominates_bh_dominates_raw(raw in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let h = holm_adjust(&raw);
            let b = bh_adjust(&raw);
            for i in 0..raw.len() {
                prop_assert!(h[i] >= b[i] - 1e-15);
                prop_assert!(b[i] >= raw[i] - 1e-15);
                prop_assert!(h[i] <= 1.0 && b[i] <= 1.0);
            }
        }

        #[test]
        fn adjustments_are_monotone(raw in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            for adj in [holm_adjust(&raw), bh_adjust(&raw)] {
                for i in 0..raw.len() {
                    for j in 0..raw.len() {
                        if raw[i] <= raw[j] {
                            prop_assert!(adj[i] <= adj[j] + 1e-15);
                        }
                    }
                }
            }
        }
    }
}
