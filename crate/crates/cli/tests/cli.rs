use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use difkit::report::AnalysisReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_difkit"));
    c.env("DIFKIT_THREADS", "1");
    c
}

fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn analyze(out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("analyze")
        .arg("--data")
        .arg(asset("data/sample_responses.csv"))
        .arg("--items")
        .arg(asset("data/sample_items.toml"))
        .args(["--ref-group", "REF", "--seed", "7", "--out"])
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn analyze_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = analyze(dir.path(), &["--anchors", "fixed:I20"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report = AnalysisReport::from_json(&json).unwrap();
    assert_eq!(report.schema, 1);
    assert_eq!(report.metadata.input_digest.len(), 64);
    assert_eq!(report.wald.as_ref().unwrap().anchors, vec!["I20".to_string()]);

    // Round trip is a fixed point.
    let again = AnalysisReport::from_json(&report.to_json()).unwrap();
    assert_eq!(again, report);
    assert_eq!(again.to_json(), report.to_json());

    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| I20 | 2PL | . | . | . |"));
    let icc = std::fs::read_to_string(dir.path().join("icc.csv")).unwrap();
    assert!(icc.starts_with("item_id,group,theta,p\n"));

    // Planted DIF on I02 and I12 is found by both procedures.
    let both: Vec<usize> = report
        .wald_flagged()
        .into_iter()
        .filter(|i| report.genlog_flagged().contains(i))
        .collect();
    assert!(both.contains(&1) && both.contains(&11), "{both:?}");
    for id in ["I02", "I12"] {
        assert!(icc.lines().any(|l| l.starts_with(&format!("{id},"))));
    }
}

#[test]
fn format_flag_limits_optional_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = analyze(dir.path(), &["--methods", "genlog", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("report.json").exists());
    assert!(!dir.path().join("report.md").exists());
    assert!(!dir.path().join("icc.csv").exists());
    let report = AnalysisReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report.wald.is_none() && report.icc.is_empty());
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        &["--alpha", "1.5"][..],
        &["--anchors", "fixed:NOPE"],
        &["--anchors", "mp:0"],
        &["--adjust", "bonferroni"],
        &["--missing", "zero"],
        &["--methods", "mh"],
    ] {
        let out = analyze(dir.path(), extra);
        assert_eq!(out.status.code(), Some(2), "{extra:?}");
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(doc["status"], "invalid");
        assert!(!doc["errors"][0]["message"].as_str().unwrap().is_empty());
    }
    let out = bin()
        .args(["analyze", "--ref-group", "REF", "--data"])
        .arg(asset("data/missing.csv"))
        .arg("--items")
        .arg(asset("data/sample_items.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn purification_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("analyze")
        .arg("--data")
        .arg(asset("data/nonconv_responses.csv"))
        .arg("--items")
        .arg(asset("data/nonconv_items.toml"))
        .args(["--ref-group", "G1", "--methods", "genlog", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let report = AnalysisReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let g = report.genlog.as_ref().unwrap();
    assert!(!g.converged && !g.trace.converged);
    assert_eq!(g.trace.iterations.last().unwrap().len(), 6);
    assert_eq!(report.errors[0].kind, "purification_non_convergence");
}

#[test]
fn simulate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let run = |methods: &str, sub: &str| {
        let out = bin()
            .arg("simulate")
            .arg("--scenario")
            .arg(asset("scenarios/smoke.toml"))
            .args(["--reps", "1", "--methods", methods, "--out"])
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(dir.path().join(sub).join("summary.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()
    };
    let both = run("wald,genlog", "both");
    assert_eq!(both["replications"], 1);
    assert_eq!(both["wald"]["completed"].as_u64().unwrap() + both["wald"]["non_converged"].as_u64().unwrap() + both["wald"]["failed"].as_u64().unwrap(), 1);
    assert!(dir.path().join("both/summary.csv").exists());
    let genlog = run("genlog", "genlog");
    assert!(genlog.get("wald").is_none());
    assert_eq!(genlog["schema"], 1);

    let bad = bin()
        .arg("simulate")
        .arg("--scenario")
        .arg(asset("scenarios/does_not_exist.toml"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn describe_prints_tables() {
    let out = bin()
        .arg("describe")
        .arg("--data")
        .arg(asset("data/sample_responses.csv"))
        .args(["--ref-group", "REF"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Item statistics by group"));
    assert!(text.contains("| REF |"));
}
