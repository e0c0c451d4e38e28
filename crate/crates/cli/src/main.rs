use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use difkit::report::{analyze, describe, render_descriptives, render_markdown, AnalysisConfig, ReportError};
use difkit::sim::{run_study, SimMethod, SimScenario, StudyOptions};
use difkit::{load_item_specs, load_responses, Adjustment, AnchorChoice, GenLogOptions, IngestLayout, MissingPolicy};
use sha2::{Digest, Sha256};

const EXIT_INVALID: u8 = 2;
const EXIT_NON_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "difkit", version, about = "Multi-group differential item functioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Wald and logistic DIF procedures on a response file.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study from a scenario file.
    Simulate(SimulateArgs),
    /// Item statistics and dimensionality screen.
    Describe(DescribeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Response CSV: one row per person, 0/1 item columns.
    #[arg(long)]
    data: PathBuf,
    /// Column holding group labels.
    #[arg(long, default_value = "group")]
    group_column: String,
    /// Column holding person identifiers; a "pid" or "id" column is used when present.
    #[arg(long)]
    id_column: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Item specification file.
    #[arg(long)]
    items: PathBuf,
    /// Label of the reference group.
    #[arg(long)]
    ref_group: String,
    /// Comma-separated: wald, genlog.
    #[arg(long, default_value = "wald,genlog")]
    methods: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// holm, bh or none; logistic procedure only.
    #[arg(long, default_value = "holm")]
    adjust: String,
    /// mp:N or fixed:ID[,ID...]
    #[arg(long, default_value = "mp:1")]
    anchors: String,
    /// ignore or incorrect; affects the logistic matching score.
    #[arg(long, default_value = "incorrect")]
    missing: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated: json, md, csv. report.json is always written.
    #[arg(long, default_value = "json,md,csv")]
    format: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 100)]
    reps: u64,
    #[arg(long, default_value = "wald,genlog")]
    methods: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "holm")]
    adjust: String,
    #[arg(long, default_value = "mp:1")]
    anchors: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    ref_group: Option<String>,
    /// Also write describe.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        error: error.into(),
    }
}

fn parse_methods(s: &str) -> anyhow::Result<Vec<SimMethod>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: SimMethod = part.parse().map_err(|e: String| anyhow!(e))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("no methods given");
    }
    Ok(out)
}

fn parse_anchors(s: &str) -> anyhow::Result<AnchorChoice> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| anyhow!("anchors must be mp:N or fixed:ID[,ID...]"))?;
    match kind.trim().to_ascii_lowercase().as_str() {
        "mp" => {
            let n: usize = rest.trim().parse().context("mp anchor count")?;
            if n == 0 {
                bail!("mp anchor count must be at least 1");
            }
            Ok(AnchorChoice::Mp(n))
        }
        "fixed" => {
            let ids: Vec<String> = rest
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect();
            if ids.is_empty() {
                bail!("fixed anchors need at least one item id");
            }
            Ok(AnchorChoice::Fixed(ids))
        }
        other => bail!("unknown anchor rule {other:?}"),
    }
}

fn parse_missing(s: &str) -> anyhow::Result<MissingPolicy> {
    match s.trim().to_ascii_lowercase().as_str() {
        "ignore" => Ok(MissingPolicy::IgnoreInLikelihood),
        "incorrect" => Ok(MissingPolicy::ScoreAsIncorrect),
        other => bail!("unknown missing policy {other:?} (expected ignore or incorrect)"),
    }
}

fn check_alpha(alpha: f64) -> anyhow::Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("alpha must be in (0, 1)");
    }
    Ok(())
}

fn digest(paths: &[&Path]) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn detect_id_column(path: &Path) -> Option<String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).ok()?;
    let headers = rdr.headers().ok()?;
    ["pid", "id"]
        .into_iter()
        .find(|c| headers.iter().any(|h| h == *c))
        .map(String::from)
}

fn layout(input: &DataArgs, reference: Option<&str>) -> IngestLayout {
    let mut l = IngestLayout::new(input.group_column.clone());
    if let Some(id) = input.id_column.clone().or_else(|| detect_id_column(&input.data)) {
        l = l.with_id_column(id);
    }
    if let Some(r) = reference {
        l = l.with_reference(r);
    }
    l
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(invalid)
}

/// Records a validation failure in `report.json` when the output directory is usable.
fn write_error_report(out: &Path, err: &anyhow::Error) {
    let kind = err
        .downcast_ref::<difkit::Error>()
        .map(|e| ReportError::new("input", e).kind)
        .unwrap_or_else(|| "invalid".into());
    let doc = serde_json::json!({
        "schema": difkit::report::SCHEMA_VERSION,
        "status": "invalid",
        "errors": [{ "stage": "input", "kind": kind, "message": format!("{err:#}") }],
    });
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("report.json"), format!("{:#}\n", doc));
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let prepared = (|| -> anyhow::Result<_> {
        check_alpha(args.alpha)?;
        let config = AnalysisConfig {
            methods: parse_methods(&args.methods)?,
            alpha: args.alpha,
            adjust: args.adjust.parse::<Adjustment>().map_err(|e| anyhow!(e))?,
            anchors: parse_anchors(&args.anchors)?,
            missing: parse_missing(&args.missing)?,
            seed: args.seed,
        };
        let formats: Vec<String> = args.format.split(',').map(|f| f.trim().to_ascii_lowercase()).collect();
        if let Some(bad) = formats.iter().find(|f| !["json", "md", "csv", ""].contains(&f.as_str())) {
            bail!("unknown format {bad:?} (expected json, md or csv)");
        }
        let data = load_responses(&args.input.data, &layout(&args.input, Some(&args.ref_group)))?;
        let specs = load_item_specs(&args.items)?;
        let digest = digest(&[&args.input.data, &args.items])?;
        Ok((config, formats, data, specs, digest))
    })();
    let (config, formats, data, specs, digest) = match prepared {
        Ok(p) => p,
        Err(e) => {
            write_error_report(&args.out, &e);
            return Err(invalid(e));
        }
    };
    let outcome = match analyze(&data, &specs, &config, &digest) {
        Ok(o) => o,
        Err(e) => {
            let e = anyhow::Error::from(e);
            write_error_report(&args.out, &e);
            return Err(invalid(e));
        }
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(invalid)?;
    let report = &outcome.report;
    write(&args.out, "report.json", &report.to_json())?;
    if formats.iter().any(|f| f == "md") {
        write(&args.out, "report.md", &render_markdown(report))?;
    }
    if formats.iter().any(|f| f == "csv") {
        write(&args.out, "icc.csv", &report.icc_csv())?;
    }
    log::info!(
        "wald flagged {:?}, genlog flagged {:?}",
        report.wald_flagged(),
        report.genlog_flagged()
    );
    if outcome.converged {
        Ok(())
    } else {
        let msgs: Vec<String> = report.errors.iter().map(|e| e.message.clone()).collect();
        Err(Failure {
            code: EXIT_NON_CONVERGENCE,
            error: anyhow!("estimation did not converge: {}", msgs.join("; ")),
        })
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let (scenario, methods, opts) = (|| -> anyhow::Result<_> {
        check_alpha(args.alpha)?;
        let mut scenario = SimScenario::load(&args.scenario)?;
        if let Some(seed) = args.seed {
            scenario.seed = seed;
        }
        let methods = parse_methods(&args.methods)?;
        let opts = StudyOptions {
            alpha: args.alpha,
            anchors: parse_anchors(&args.anchors)?,
            genlog: GenLogOptions {
                alpha: args.alpha,
                adjust: args.adjust.parse::<Adjustment>().map_err(|e| anyhow!(e))?,
                ..GenLogOptions::default()
            },
            ..StudyOptions::default()
        };
        Ok((scenario, methods, opts))
    })()
    .map_err(invalid)?;
    let summary = run_study(&scenario, &methods, args.reps, &opts).map_err(invalid)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(invalid)?;
    write(&args.out, "summary.json", &(summary.to_json() + "\n"))?;
    write(&args.out, "summary.csv", &summary.to_csv())?;
    for m in &methods {
        if let Some(s) = summary.method(*m) {
            println!(
                "{m}: {} completed, {} non-converged, {} failed, mean flags {:.3}",
                s.completed, s.non_converged, s.failed, s.mean_flag_count
            );
        }
    }
    Ok(())
}

fn cmd_describe(args: &DescribeArgs) -> Result<(), Failure> {
    let data = load_responses(&args.input.data, &layout(&args.input, args.ref_group.as_deref()))
        .map_err(invalid)?;
    let digest = digest(&[&args.input.data]).map_err(invalid)?;
    let report = describe(&data, &digest);
    print!("{}", render_descriptives(&report));
    if let Some(out) = &args.out {
        fs::create_dir_all(out)
            .with_context(|| format!("creating {}", out.display()))
            .map_err(invalid)?;
        write(out, "describe.json", &report.to_json())?;
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("DIFKIT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not set thread count: {e}");
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Describe(a) => cmd_describe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
