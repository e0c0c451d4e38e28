use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::params::{GroupDist, ItemParams, ParamKind};
use crate::data::{ItemSpec, ModelKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    EqualAcrossGroups,
    FreePerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistPlan {
    Estimate,
    Fixed(GroupDist),
}

/// Which parameters are shared across groups and which group distributions
/// are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPlan {
    /// Per item, indexed by [`ParamKind::index`]; the guess entry is ignored for 2PL items.
    pub items: Vec<[Sharing; 3]>,
    pub dists: Vec<DistPlan>,
}

impl ConstraintPlan {
    /// Every item parameter equal across groups; focal distributions estimated.
    pub fn all_equal(n_items: usize, n_groups: usize) -> Self {
        ConstraintPlan {
            items: vec![[Sharing::EqualAcrossGroups; 3]; n_items],
            dists: Self::reference_fixed(n_groups),
        }
    }

    /// Every item parameter free per group; all distributions fixed.
    pub fn all_free(n_items: usize, dists: &[GroupDist]) -> Self {
        ConstraintPlan {
            items: vec![[Sharing::FreePerGroup; 3]; n_items],
            dists: dists.iter().map(|&d| DistPlan::Fixed(d)).collect(),
        }
    }

    /// Anchors equal across groups, other items free; focal distributions estimated.
    pub fn anchored(n_items: usize, n_groups: usize, anchors: &[usize]) -> Self {
        let items = (0..n_items)
            .map(|i| {
                if anchors.contains(&i) {
                    [Sharing::EqualAcrossGroups; 3]
                } else {
                    [Sharing::FreePerGroup; 3]
                }
            })
            .collect();
        ConstraintPlan {
            items,
            dists: Self::reference_fixed(n_groups),
        }
    }

    fn reference_fixed(n_groups: usize) -> Vec<DistPlan> {
        (0..n_groups)
            .map(|g| {
                if g == 0 {
                    DistPlan::Fixed(GroupDist::STANDARD)
                } else {
                    DistPlan::Estimate
                }
            })
            .collect()
    }

    pub fn n_groups(&self) -> usize {
        self.dists.len()
    }

    pub fn sharing(&self, item: usize, kind: ParamKind) -> Sharing {
        self.items[item][kind.index()]
    }

    pub fn validate(&self, specs: &[ItemSpec]) -> Result<()> {
        if self.items.len() != specs.len() {
            return Err(Error::Invalid(format!(
                "plan covers {} items but {} specs were given",
                self.items.len(),
                specs.len()
            )));
        }
        if self.dists.is_empty() {
            return Err(Error::Invalid("plan has no groups".into()));
        }
        if self.dists[0] != DistPlan::Fixed(GroupDist::STANDARD) {
            return Err(Error::Invalid(
                "reference group distribution must be fixed at mean 0, sd 1".into(),
            ));
        }
        for d in &self.dists {
            if let DistPlan::Fixed(dist) = d {
                if !(dist.sd > 0.0) || !dist.mean.is_finite() {
                    return Err(Error::Invalid(format!("invalid fixed distribution {dist:?}")));
                }
            }
        }
        Ok(())
    }
}

/// What one coordinate of the free-parameter vector means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamLabel {
    Item {
        item: usize,
        /// `None` when shared across all groups.
        group: Option<usize>,
        kind: ParamKind,
    },
    Mean { group: usize },
    Sd { group: usize },
}

/// Maps (item, group, parameter) and group distributions to coordinates of
/// the packed free-parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    item_index: Vec<Vec<[Option<usize>; 3]>>,
    dist_index: Vec<Option<(usize, usize)>>,
    labels: Vec<ParamLabel>,
}

impl ParamLayout {
    pub fn new(specs: &[ItemSpec], plan: &ConstraintPlan) -> Self {
        let n_groups = plan.n_groups();
        let mut labels = Vec::new();
        let mut item_index = vec![vec![[None; 3]; n_groups]; specs.len()];
        for (item, spec) in specs.iter().enumerate() {
            for &kind in ParamKind::for_model(spec.model) {
                match plan.sharing(item, kind) {
                    Sharing::EqualAcrossGroups => {
                        let idx = labels.len();
                        labels.push(ParamLabel::Item {
                            item,
                            group: None,
                            kind,
                        });
                        for slot in item_index[item].iter_mut() {
                            slot[kind.index()] = Some(idx);
                        }
                    }
                    Sharing::FreePerGroup => {
                        for g in 0..n_groups {
                            item_index[item][g][kind.index()] = Some(labels.len());
                            labels.push(ParamLabel::Item {
                                item,
                                group: Some(g),
                                kind,
                            });
                        }
                    }
                }
            }
        }
        let dist_index = plan
            .dists
            .iter()
            .enumerate()
            .map(|(group, d)| match d {
                DistPlan::Fixed(_) => None,
                DistPlan::Estimate => {
                    let m = labels.len();
                    labels.push(ParamLabel::Mean { group });
                    labels.push(ParamLabel::Sd { group });
                    Some((m, m + 1))
                }
            })
            .collect();
        ParamLayout {
            item_index,
            dist_index,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ParamLabel] {
        &self.labels
    }

    pub fn n_groups(&self) -> usize {
        self.dist_index.len()
    }

    pub fn item_param(&self, item: usize, group: usize, kind: ParamKind) -> Option<usize> {
        self.item_index[item][group][kind.index()]
    }

    pub(crate) fn item_slots(&self, item: usize, group: usize) -> [Option<usize>; 3] {
        self.item_index[item][group]
    }

    pub fn dist_params(&self, group: usize) -> Option<(usize, usize)> {
        self.dist_index[group]
    }

    /// Groups whose likelihood depends on coordinate `k`.
    pub fn groups_touching(&self, k: usize) -> Vec<usize> {
        match self.labels[k] {
            ParamLabel::Item { item, group, .. } => match group {
                Some(g) => vec![g],
                None => (0..self.n_groups())
                    .filter(|&g| self.item_index[item][g].contains(&Some(k)))
                    .collect(),
            },
            ParamLabel::Mean { group } | ParamLabel::Sd { group } => vec![group],
        }
    }

    pub fn pack(&self, state: &ModelState) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        for (k, label) in self.labels.iter().enumerate() {
            v[k] = match *label {
                ParamLabel::Item { item, group, kind } => state.items[item][group.unwrap_or(0)]
                    .get(kind)
                    .expect("layout matches state"),
                ParamLabel::Mean { group } => state.dists[group].mean,
                ParamLabel::Sd { group } => state.dists[group].sd,
            };
        }
        v
    }

    pub fn unpack(&self, v: &DVector<f64>, state: &mut ModelState) {
        for (k, label) in self.labels.iter().enumerate() {
            self.set(k, *label, v[k], state);
        }
    }

    pub(crate) fn set_coordinate(&self, k: usize, value: f64, state: &mut ModelState) {
        self.set(k, self.labels[k], value, state);
    }

    fn set(&self, k: usize, label: ParamLabel, value: f64, state: &mut ModelState) {
        match label {
            ParamLabel::Item { item, group, kind } => match group {
                Some(g) => state.items[item][g].set(kind, value),
                None => {
                    for g in 0..self.n_groups() {
                        if self.item_index[item][g][kind.index()] == Some(k) {
                            state.items[item][g].set(kind, value);
                        }
                    }
                }
            },
            ParamLabel::Mean { group } => state.dists[group].mean = value,
            ParamLabel::Sd { group } => state.dists[group].sd = value,
        }
    }
}

/// Full parameter state: per item per group, plus group distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Indexed `[item][group]`.
    pub items: Vec<Vec<ItemParams>>,
    pub dists: Vec<GroupDist>,
}

impl ModelState {
    /// Same item parameters in every group.
    pub fn shared(items: &[ItemParams], dists: Vec<GroupDist>) -> Self {
        ModelState {
            items: items.iter().map(|p| vec![*p; dists.len()]).collect(),
            dists,
        }
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_groups(&self) -> usize {
        self.dists.len()
    }

    pub(crate) fn check_against(&self, specs: &[ItemSpec]) -> Result<()> {
        if self.items.len() != specs.len() {
            return Err(Error::Invalid("state and specs disagree on item count".into()));
        }
        for (row, spec) in self.items.iter().zip(specs) {
            if row.len() != self.dists.len() {
                return Err(Error::Invalid("state has ragged group rows".into()));
            }
            for p in row {
                if (p.model() == ModelKind::ThreePL) != (spec.model == ModelKind::ThreePL) {
                    return Err(Error::Invalid(format!(
                        "item {}: state model does not match spec",
                        spec.id
                    )));
                }
            }
        }
        Ok(())
    }
}
