use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GuessPrior, ItemSpec, ModelKind};
use crate::error::{Error, Result};
use crate::irt::{GroupDist, ItemParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGroup {
    pub name: String,
    pub n: usize,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimItem {
    pub id: String,
    pub model: ModelKind,
    pub a: f64,
    pub b: f64,
    /// Lower asymptote, 3PL only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess: Option<f64>,
}

/// DIF injected into one item for one focal group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifEntry {
    pub item: String,
    pub group: usize,
    #[serde(default)]
    pub delta_b: f64,
    #[serde(default = "one")]
    pub a_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub seed: u64,
    #[serde(rename = "group")]
    pub groups: Vec<SimGroup>,
    #[serde(rename = "item")]
    pub items: Vec<SimItem>,
    #[serde(rename = "dif", default)]
    pub dif: Vec<DifEntry>,
}

impl SimScenario {
    /// Spread-out item bank with no DIF: slopes in [0.8, 1.6], difficulties in
    /// [-1.5, 1.5], and every `three_pl_every`-th item (counting from the
    /// first) a 3PL item with guessing 0.2. Zero disables 3PL items.
    pub fn panel(n_items: usize, groups: Vec<SimGroup>, three_pl_every: usize, seed: u64) -> Self {
        let items = (0..n_items)
            .map(|j| {
                let three = three_pl_every > 0 && j % three_pl_every == 0;
                SimItem {
                    id: format!("I{:02}", j + 1),
                    model: if three { ModelKind::ThreePL } else { ModelKind::TwoPL },
                    a: 0.8 + 0.8 * ((j * 7) % 10) as f64 / 9.0,
                    b: if n_items > 1 {
                        -1.5 + 3.0 * ((j * 11) % n_items) as f64 / (n_items - 1) as f64
                    } else {
                        0.0
                    },
                    guess: three.then_some(0.2),
                }
            })
            .collect();
        SimScenario {
            seed,
            groups,
            items,
            dif: Vec::new(),
        }
    }

    /// `n` persons per group with the given latent means and unit sd.
    pub fn groups(n: usize, means: &[f64]) -> Vec<SimGroup> {
        means
            .iter()
            .enumerate()
            .map(|(g, &mean)| SimGroup {
                name: format!("G{}", g + 1),
                n,
                mean,
                sd: 1.0,
            })
            .collect()
    }

    pub fn with_dif(mut self, item: usize, group: usize, delta_b: f64, a_ratio: f64) -> Self {
        self.dif.push(DifEntry {
            item: self.items[item].id.clone(),
            group,
            delta_b,
            a_ratio,
        });
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SimScenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.groups.is_empty() {
            return bad("scenario has no groups".into());
        }
        if self.items.is_empty() {
            return bad("scenario has no items".into());
        }
        for g in &self.groups {
            if g.n == 0 || !(g.sd > 0.0) || !g.mean.is_finite() {
                return bad(format!("group {:?}: need n >= 1, finite mean and sd > 0", g.name));
            }
        }
        for (i, it) in self.items.iter().enumerate() {
            if self.items[..i].iter().any(|o| o.id == it.id) {
                return bad(format!("duplicate item id {:?}", it.id));
            }
            if !(it.a > 0.0) || !it.b.is_finite() {
                return bad(format!("item {:?}: need a > 0 and finite b", it.id));
            }
            match (it.model, it.guess) {
                (ModelKind::TwoPL, None) => {}
                (ModelKind::ThreePL, Some(g)) if g > 0.0 && g < 1.0 => {}
                _ => return bad(format!("item {:?}: guess must be in (0, 1) for 3PL only", it.id)),
            }
        }
        for d in &self.dif {
            if d.group == 0 {
                return bad(format!("DIF on item {:?} targets the reference group", d.item));
            }
            if d.group >= self.groups.len() {
                return bad(format!("DIF on item {:?} targets unknown group {}", d.item, d.group));
            }
            if !(d.a_ratio > 0.0) || !d.delta_b.is_finite() {
                return bad(format!("DIF on item {:?}: need a_ratio > 0", d.item));
            }
            if !self.items.iter().any(|it| it.id == d.item) {
                return bad(format!("DIF names unknown item {:?}", d.item));
            }
        }
        Ok(())
    }

    /// Generating parameters of `item` in `group` with DIF applied.
    pub fn true_params(&self, item: usize, group: usize) -> ItemParams {
        let it = &self.items[item];
        let (mut a, mut b) = (it.a, it.b);
        for d in self.dif.iter().filter(|d| d.item == it.id && d.group == group) {
            a *= d.a_ratio;
            b += d.delta_b;
        }
        ItemParams::from_difficulty(a, b, it.guess)
    }

    pub fn dists(&self) -> Vec<GroupDist> {
        self.groups.iter().map(|g| GroupDist::new(g.mean, g.sd)).collect()
    }

    /// Indices of items carrying any DIF.
    pub fn dif_items(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.dif.iter().any(|d| d.item == self.items[i].id))
            .collect()
    }

    pub fn item_specs(&self) -> Vec<ItemSpec> {
        self.items
            .iter()
            .map(|it| ItemSpec {
                id: it.id.clone(),
                model: it.model,
                guess_prior: (it.model == ModelKind::ThreePL).then(GuessPrior::default),
            })
            .collect()
    }
}
