use serde::{Deserialize, Serialize};

/// Equally spaced nodes on the standardized latent scale with normal-shaped
/// weights summing to one. Groups rescale nodes by their mean and sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Quadrature {
    pub fn equally_spaced(n: usize, lo: f64, hi: f64) -> Self {
        assert!(n >= 2 && hi > lo, "quadrature needs at least two nodes on a proper interval");
        let step = (hi - lo) / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        let raw: Vec<f64> = nodes.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Quadrature {
            nodes,
            weights,
            log_weights,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::equally_spaced(49, -6.0, 6.0)
    }
}
