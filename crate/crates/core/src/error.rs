use std::path::PathBuf;

use thiserror::Error;

use crate::genlog::Purification;
use crate::irt::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("unknown group label {0:?}")]
    UnknownGroupLabel(String),

    #[error("non-binary response {token:?} at line {line}, column {column:?}")]
    NonBinaryResponse {
        line: usize,
        column: String,
        token: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("item {0} is all-correct or all-incorrect in every contributing group")]
    DegenerateItem(String),

    #[error("EM did not converge after {cycles} cycles (last change {last_change:.3e})")]
    NonConvergence {
        cycles: usize,
        last_change: f64,
        fit: Box<FitResult>,
    },

    #[error("information matrix is singular; the model is not identified")]
    SingularInformation,

    #[error("contrast covariance is singular (condition number {condition:.3e})")]
    SingularContrastCovariance { condition: f64 },

    #[error("logistic fit separated (|coefficient| = {magnitude:.2})")]
    SeparationDetected { magnitude: f64 },

    #[error("logistic fit hit the iteration limit of {0}")]
    IterationLimit(usize),

    #[error("nested models violate ordering: restricted loglik {restricted} > full loglik {full}")]
    NestingViolation { restricted: f64, full: f64 },

    #[error("item purification did not converge after {} iterations", .0.trace.iterations.len())]
    PurificationNonConvergence(Box<Purification>),

    #[error("fewer than two items have variance; correlation matrix is degenerate")]
    DegenerateCorrelation,

    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn in_step(self, step: &'static str) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// True when the error (possibly wrapped in a step label) is an estimation
    /// non-convergence rather than a validation failure.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. } | Error::PurificationNonConvergence(_) => true,
            Error::Step { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::MalformedRow {
            line,
            reason: err.to_string(),
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(err: toml::de::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
