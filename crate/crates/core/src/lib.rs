//! Differential item functioning across several groups: an IRT-based Wald
//! test with anchor selection, generalized logistic regression with
//! purification, and Monte Carlo comparison of the two.

pub mod data;
pub mod error;
pub mod genlog;
pub mod irt;
pub mod report;
pub mod sim;
pub mod stats;
pub mod wald;

pub use data::{
    describe_items, load_item_specs, load_responses, parse_item_specs, read_responses,
    split_scores_missing_policy, write_responses, GuessPrior, IngestLayout, ItemDescriptives,
    ItemSpec, MissingPolicy, ModelKind, ResponseMatrix, ScoredView,
};
pub use error::{Error, Result};
pub use genlog::{purify_and_test, GenLogOptions, GenLogResult, ItemOutcome, Purification};
pub use irt::{fit_mml_em, ConstraintPlan, FitOptions, FitResult, GroupDist, ItemParams};
pub use report::{analyze, render_markdown, AnalysisConfig, AnalysisOutcome, AnalysisReport};
pub use sim::{generate, run_study, SimMethod, SimScenario, SimSummary, StudyOptions};
pub use stats::{chisq_sf, Adjustment};
pub use wald::{run_wald_pipeline, AnchorChoice, WaldItemResult, WaldOptions};
