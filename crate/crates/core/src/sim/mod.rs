//! Monte Carlo data generation and replication studies.

mod scenario;

pub use scenario::{DifEntry, SimGroup, SimItem, SimScenario};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ResponseMatrix;
use crate::error::Error;
use crate::genlog::{purify_and_test, GenLogOptions, ItemOutcome};
use crate::wald::{run_wald_pipeline, AnchorChoice, WaldOptions};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one person of one replication.
fn person_rng(seed: u64, replication: u64, person: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ replication) ^ person);
    ChaCha8Rng::seed_from_u64(key)
}

/// Draws one replication. The same scenario and index always give the same matrix.
pub fn generate(scenario: &SimScenario, replication: u64) -> ResponseMatrix {
    let n_items = scenario.n_items();
    let params: Vec<Vec<_>> = (0..scenario.n_groups())
        .map(|g| (0..n_items).map(|j| scenario.true_params(j, g)).collect())
        .collect();
    let mut group_of = Vec::new();
    let mut cells = Vec::new();
    let mut person = 0u64;
    for (g, grp) in scenario.groups.iter().enumerate() {
        for _ in 0..grp.n {
            let mut rng = person_rng(scenario.seed, replication, person);
            let z: f64 = rng.sample(StandardNormal);
            let theta = grp.mean + grp.sd * z;
            for p in &params[g] {
                let u: f64 = rng.random();
                cells.push(Some(u < p.prob(theta)));
            }
            group_of.push(g);
            person += 1;
        }
    }
    ResponseMatrix::new(
        scenario.items.iter().map(|i| i.id.clone()).collect(),
        (0..person).map(|p| format!("p{p}")).collect(),
        scenario.groups.iter().map(|g| g.name.clone()).collect(),
        group_of,
        cells,
    )
    .expect("scenario validated")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    /// Sweep, MP anchor, anchored Wald test.
    Wald1Pipeline,
    /// Generalized logistic regression with purification.
    GenLogistic,
}

impl std::str::FromStr for SimMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wald" | "wald1" | "wald1_pipeline" => Ok(SimMethod::Wald1Pipeline),
            "genlog" | "genlogistic" | "gen_logistic" => Ok(SimMethod::GenLogistic),
            other => Err(format!("unknown method {other:?} (expected wald or genlog)")),
        }
    }
}

impl std::fmt::Display for SimMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimMethod::Wald1Pipeline => "wald",
            SimMethod::GenLogistic => "genlog",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub alpha: f64,
    pub wald: WaldOptions,
    pub anchors: AnchorChoice,
    pub genlog: GenLogOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            alpha: 0.05,
            wald: WaldOptions::default(),
            anchors: AnchorChoice::Mp(1),
            genlog: GenLogOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepStatus {
    Ok,
    NonConverged,
    Failed,
}

/// What one method did on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub replication: u64,
    pub status: RepStatus,
    pub flagged: Vec<usize>,
    /// Items whose nonuniform (slope) test rejected.
    pub flagged_nudif: Vec<usize>,
    /// Raw omnibus p per item; `None` for anchors and untestable items.
    pub p_raw: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

fn nudif_flags(results: &[ItemOutcome]) -> Vec<usize> {
    (0..results.len())
        .filter(|&i| results[i].tested().is_some_and(|r| r.nudif.flagged))
        .collect()
}

/// Runs one method on one replication's data.
pub fn run_method(
    data: &ResponseMatrix,
    scenario: &SimScenario,
    method: SimMethod,
    opts: &StudyOptions,
    replication: u64,
) -> RepRecord {
    let n = scenario.n_items();
    let failed = |status, e: Error| RepRecord {
        replication,
        status,
        flagged: Vec::new(),
        flagged_nudif: Vec::new(),
        p_raw: vec![None; n],
        message: Some(e.to_string()),
    };
    match method {
        SimMethod::Wald1Pipeline => {
            let specs = scenario.item_specs();
            match run_wald_pipeline(data, &specs, &opts.anchors, &opts.wald) {
                Ok(w) => RepRecord {
                    replication,
                    status: RepStatus::Ok,
                    flagged: w.flagged(opts.alpha),
                    flagged_nudif: (0..w.wald1.items.len())
                        .filter(|&i| w.wald1.items[i].nudif.is_some_and(|s| s.p < opts.alpha))
                        .collect(),
                    p_raw: w.wald1.items.iter().map(|r| r.all.map(|s| s.p)).collect(),
                    message: None,
                },
                Err(e) if e.is_non_convergence() => failed(RepStatus::NonConverged, e),
                Err(e) => failed(RepStatus::Failed, e),
            }
        }
        SimMethod::GenLogistic => {
            let gopts = GenLogOptions {
                alpha: opts.alpha,
                ..opts.genlog
            };
            match purify_and_test(data, &gopts) {
                Ok(p) => RepRecord {
                    replication,
                    status: RepStatus::Ok,
                    flagged: p.flagged(),
                    flagged_nudif: nudif_flags(&p.results),
                    p_raw: p
                        .results
                        .iter()
                        .map(|o| o.tested().map(|r| r.all.p_raw))
                        .collect(),
                    message: None,
                },
                Err(Error::PurificationNonConvergence(p)) => RepRecord {
                    replication,
                    status: RepStatus::NonConverged,
                    flagged: p.flagged(),
                    flagged_nudif: nudif_flags(&p.results),
                    p_raw: p
                        .results
                        .iter()
                        .map(|o| o.tested().map(|r| r.all.p_raw))
                        .collect(),
                    message: Some("item purification did not converge".into()),
                },
                Err(e) => failed(RepStatus::Failed, e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: SimMethod,
    /// Replications that finished normally; rates are over these.
    pub completed: u64,
    pub non_converged: u64,
    pub failed: u64,
    /// Per item: completed replications that flagged it.
    pub rejections: Vec<u64>,
    pub rejection_rate: Vec<f64>,
    /// Per item: completed replications whose nonuniform test rejected.
    pub nudif_rejections: Vec<u64>,
    pub nudif_rejection_rate: Vec<f64>,
    pub mean_flag_count: f64,
    pub records: Vec<RepRecord>,
}

impl MethodSummary {
    fn from_records(method: SimMethod, n_items: usize, records: Vec<RepRecord>) -> Self {
        let mut rejections = vec![0u64; n_items];
        let mut nudif_rejections = vec![0u64; n_items];
        let (mut completed, mut non_converged, mut failed, mut flags) = (0u64, 0u64, 0u64, 0u64);
        for r in &records {
            match r.status {
                RepStatus::Ok => {
                    completed += 1;
                    flags += r.flagged.len() as u64;
                    for &i in &r.flagged {
                        rejections[i] += 1;
                    }
                    for &i in &r.flagged_nudif {
                        nudif_rejections[i] += 1;
                    }
                }
                RepStatus::NonConverged => non_converged += 1,
                RepStatus::Failed => failed += 1,
            }
        }
        let denom = completed.max(1) as f64;
        MethodSummary {
            method,
            completed,
            non_converged,
            failed,
            rejection_rate: rejections.iter().map(|&r| r as f64 / denom).collect(),
            rejections,
            nudif_rejection_rate: nudif_rejections.iter().map(|&r| r as f64 / denom).collect(),
            nudif_rejections,
            mean_flag_count: flags as f64 / denom,
            records,
        }
    }

    /// Mean rejection rate over the given items.
    pub fn mean_rate(&self, items: &[usize]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        items.iter().map(|&i| self.rejection_rate[i]).sum::<f64>() / items.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub schema: u32,
    pub seed: u64,
    pub replications: u64,
    pub alpha: f64,
    pub item_ids: Vec<String>,
    pub dif_items: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wald: Option<MethodSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genlog: Option<MethodSummary>,
}

impl SimSummary {
    pub fn method(&self, m: SimMethod) -> Option<&MethodSummary> {
        match m {
            SimMethod::Wald1Pipeline => self.wald.as_ref(),
            SimMethod::GenLogistic => self.genlog.as_ref(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// One row per method and item.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,item_id,dif,completed,non_converged,failed,rejections,rejection_rate,nudif_rejections,nudif_rejection_rate,mean_flag_count\n");
        for m in [&self.wald, &self.genlog].into_iter().flatten() {
            for (i, id) in self.item_ids.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{:.6},{},{:.6},{:.6}\n",
                    m.method,
                    id,
                    self.dif_items.contains(&i) as u8,
                    m.completed,
                    m.non_converged,
                    m.failed,
                    m.rejections[i],
                    m.rejection_rate[i],
                    m.nudif_rejections[i],
                    m.nudif_rejection_rate[i],
                    m.mean_flag_count
                ));
            }
        }
        out
    }
}

/// Generates `reps` replications and runs each method on every one.
/// Replications run concurrently; the summary does not depend on scheduling.
pub fn run_study(
    scenario: &SimScenario,
    methods: &[SimMethod],
    reps: u64,
    opts: &StudyOptions,
) -> crate::error::Result<SimSummary> {
    scenario.validate()?;
    if reps == 0 {
        return Err(Error::Invalid("a study needs at least one replication".into()));
    }
    if scenario.n_groups() < 2 {
        return Err(Error::Invalid("DIF studies need at least two groups".into()));
    }
    let per_rep: Vec<Vec<(SimMethod, RepRecord)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate(scenario, rep);
            methods
                .iter()
                .map(|&m| (m, run_method(&data, scenario, m, opts, rep)))
                .collect()
        })
        .collect();
    let n = scenario.n_items();
    let collect = |m: SimMethod| {
        methods.contains(&m).then(|| {
            let records = per_rep
                .iter()
                .flat_map(|r| r.iter().filter(|(mm, _)| *mm == m).map(|(_, rec)| rec.clone()))
                .collect();
            MethodSummary::from_records(m, n, records)
        })
    };
    Ok(SimSummary {
        schema: 1,
        seed: scenario.seed,
        replications: reps,
        alpha: opts.alpha,
        item_ids: scenario.items.iter().map(|i| i.id.clone()).collect(),
        dif_items: scenario.dif_items(),
        wald: collect(SimMethod::Wald1Pipeline),
        genlog: collect(SimMethod::GenLogistic),
    })
}
