//! Shared statistical kernels.

mod adjust;
mod dim;
mod eigen;
mod gamma;

pub use adjust::{adjust, bh_adjust, holm_adjust, Adjustment, PValueFamily};
pub use dim::{correlation_matrix, dim_screen, DimScreenResult, DEFAULT_RATIO_THRESHOLD};
pub use eigen::{jacobi_eigen, EigenDecomposition};
pub use gamma::{chisq_sf, ln_gamma, regularized_gamma_p, regularized_gamma_q};

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}
