//! Multi-group IRT models fitted by marginal maximum likelihood.

mod covariance;
mod em;
pub(crate) mod estep;
mod params;
mod plan;
mod quadrature;
mod scoring;

pub use covariance::{attach_covariance, observed_information, param_covariance, CovarianceMethod};
pub use em::{fit_mml_em, loglik_gradient, marginal_loglik, penalized_loglik, FitOptions, FitResult};
pub use params::{irf, GroupDist, ItemParams, ParamKind, SLOPE_FLOOR};
pub(crate) use params::{sigmoid, softplus};
pub use plan::{ConstraintPlan, DistPlan, ModelState, ParamLabel, ParamLayout, Sharing};
pub use quadrature::Quadrature;
pub use scoring::{default_grid, eap_scores, icc_table, theta_grid, IccRow};
