use serde::{Deserialize, Serialize};

use crate::data::ModelKind;

pub const SLOPE_FLOOR: f64 = 1e-3;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Slope-intercept item parameters for one group; guessing on the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub slope: f64,
    pub intercept: f64,
    pub logit_guess: Option<f64>,
}

impl ItemParams {
    pub fn two_pl(slope: f64, intercept: f64) -> Self {
        ItemParams {
            slope,
            intercept,
            logit_guess: None,
        }
    }

    pub fn three_pl(slope: f64, intercept: f64, logit_guess: f64) -> Self {
        ItemParams {
            slope,
            intercept,
            logit_guess: Some(logit_guess),
        }
    }

    /// Builds from the difficulty form `a (θ - b)`; `guess` is the asymptote itself.
    pub fn from_difficulty(slope: f64, difficulty: f64, guess: Option<f64>) -> Self {
        ItemParams {
            slope,
            intercept: -slope * difficulty,
            logit_guess: guess.map(logit),
        }
    }

    pub fn model(&self) -> ModelKind {
        match self.logit_guess {
            Some(_) => ModelKind::ThreePL,
            None => ModelKind::TwoPL,
        }
    }

    pub fn difficulty(&self) -> f64 {
        -self.intercept / self.slope
    }

    /// Lower asymptote (0 for 2PL).
    pub fn guess(&self) -> f64 {
        self.logit_guess.map_or(0.0, sigmoid)
    }

    pub fn get(&self, kind: ParamKind) -> Option<f64> {
        match kind {
            ParamKind::Slope => Some(self.slope),
            ParamKind::Intercept => Some(self.intercept),
            ParamKind::Guess => self.logit_guess,
        }
    }

    pub(crate) fn set(&mut self, kind: ParamKind, value: f64) {
        match kind {
            ParamKind::Slope => self.slope = value,
            ParamKind::Intercept => self.intercept = value,
            ParamKind::Guess => self.logit_guess = Some(value),
        }
    }

    #[inline]
    pub fn prob(&self, theta: f64) -> f64 {
        let s = sigmoid(self.slope * theta + self.intercept);
        match self.logit_guess {
            None => s,
            Some(z) => {
                let g = sigmoid(z);
                g + (1.0 - g) * s
            }
        }
    }

    /// `(ln P, ln (1 - P))` at `theta`.
    #[inline]
    pub fn log_probs(&self, theta: f64) -> (f64, f64) {
        let eta = self.slope * theta + self.intercept;
        match self.logit_guess {
            None => (-softplus(-eta), -softplus(eta)),
            Some(z) => {
                let g = sigmoid(z);
                let p = g + (1.0 - g) * sigmoid(eta);
                (p.ln(), -softplus(z) - softplus(eta))
            }
        }
    }
}

/// Item response function.
pub fn irf(theta: f64, item: &ItemParams) -> f64 {
    item.prob(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Slope,
    Intercept,
    Guess,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::Slope, ParamKind::Intercept, ParamKind::Guess];

    pub fn for_model(model: ModelKind) -> &'static [ParamKind] {
        &Self::ALL[..model.n_params()]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Latent-trait distribution of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDist {
    pub mean: f64,
    pub sd: f64,
}

impl GroupDist {
    pub const STANDARD: GroupDist = GroupDist { mean: 0.0, sd: 1.0 };

    pub fn new(mean: f64, sd: f64) -> Self {
        GroupDist { mean, sd }
    }
}

impl Default for GroupDist {
    fn default() -> Self {
        GroupDist::STANDARD
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn irf_values() {
        assert_abs_diff_eq!(irf(0.0, &ItemParams::two_pl(1.0, 0.0)), 0.5);
        assert_abs_diff_eq!(
            irf(1.0, &ItemParams::two_pl(2.0, 0.0)),
            1.0 / (1.0 + (-2.0f64).exp()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(irf(1.0, &ItemParams::two_pl(2.0, 0.0)), 0.880_797, epsilon = 1e-6);
        let item = ItemParams::three_pl(1.0, 0.0, logit(0.2));
        assert_abs_diff_eq!(irf(-30.0, &item), 0.2, epsilon = 1e-9);
    }

    #[test]
    fn log_probs_match_probabilities() {
        let items = [
            ItemParams::two_pl(1.3, -0.4),
            ItemParams::three_pl(0.8, 1.1, -1.2),
            ItemParams::three_pl(2.5, -3.0, -0.3),
        ];
        for item in &items {
            for &t in &[-6.0, -1.5, 0.0, 0.7, 6.0] {
                let (lp, lq) = item.log_probs(t);
                let p = item.prob(t);
                assert_abs_diff_eq!(lp.exp(), p, epsilon = 1e-14);
                assert_abs_diff_eq!(lq.exp(), 1.0 - p, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn difficulty_is_derived() {
        let item = ItemParams::from_difficulty(1.04, 0.41, None);
        assert_abs_diff_eq!(item.intercept, -0.4264, epsilon = 1e-12);
        assert_abs_diff_eq!(item.difficulty(), 0.41, epsilon = 1e-12);
    }
}
