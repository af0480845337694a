use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn regmarket(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regmarket"))
        .args(args)
        .current_dir(dir)
        .env_remove("REGMARKET_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn ledger_totals(path: &Path) -> BTreeMap<String, f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let feature = header.iter().position(|h| *h == "feature").unwrap();
    let amount = header.iter().position(|h| *h == "amount").unwrap();
    let mut totals = BTreeMap::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        *totals.entry(cells[feature].to_string()).or_insert(0.0) += cells[amount].parse::<f64>().unwrap();
    }
    totals
}

#[test]
fn simulate_writes_dataset_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&regmarket(
        &["simulate", "--case", "batch-linear", "--seed", "7", "--out", "d"],
        tmp.path(),
    ));
    for f in ["dataset.csv", "truth.json", "schema.json"] {
        assert!(tmp.path().join("d").join(f).is_file(), "{f}");
    }
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("d/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 7);
}

#[test]
fn unknown_case_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = regmarket(&["simulate", "--case", "no-such-case", "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-case"));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&regmarket(
            &[
                "simulate",
                "--case",
                "online-quantile",
                "--t",
                "500",
                "--seed",
                "3",
                "--out",
                out,
            ],
            tmp.path(),
        ));
        ok(&regmarket(
            &[
                "scenario",
                "--case",
                "multi-agent-arx",
                "--t",
                "600",
                "--seed",
                "3",
                "--out",
                &format!("{out}/s"),
            ],
            tmp.path(),
        ));
    }
    let files = |root: &Path| {
        let mut v: Vec<_> = walk(root)
            .into_iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect();
        v.sort();
        v
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(files(&a), files(&b));
    for rel in files(&a) {
        assert_eq!(
            fs::read(a.join(&rel)).unwrap(),
            fs::read(b.join(&rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn batch_case1_ledger_totals() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&regmarket(
        &["market", "batch", "--case", "batch-linear", "--out", "m"],
        tmp.path(),
    ));
    assert!(stdout.contains("audit"));
    let totals = ledger_totals(&tmp.path().join("m/ledger.csv"));
    for (f, p) in [("x2", 250.7), ("x3", 810.0), ("x4", 43.3)] {
        assert!((totals[f] - p).abs() <= 0.06 * p, "{f}: {}", totals[f]);
    }
    for f in ["report.json", "audit.json", "loss_table.csv", "cumulative_revenues.csv"] {
        assert!(tmp.path().join("m").join(f).is_file(), "{f}");
    }
}

#[test]
fn online_cumulative_revenues_never_decrease() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&regmarket(
        &["market", "online", "--case", "online-arx", "--t", "1500", "--out", "m"],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("m/cumulative_revenues.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,agent,feature,amount,cumulative");
    let mut last: BTreeMap<String, f64> = BTreeMap::new();
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let c: f64 = cells[4].parse().unwrap();
        let prev = last.insert(cells[2].to_string(), c).unwrap_or(0.0);
        assert!(c >= prev);
        rows += 1;
    }
    assert!(rows > 1000);
}

#[test]
fn oos_without_training_rows_is_a_coverage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = regmarket(
        &["market", "oos", "--case", "batch-linear", "--t", "500", "--out", "m"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_tables() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&regmarket(
        &["market", "batch", "--case", "batch-linear", "--out", "m"],
        tmp.path(),
    ));
    let summary = ok(&regmarket(&["report", "m/report.json", "--summary"], tmp.path()));
    for line in ["loss improvement", "central payment", "total paid to support"] {
        assert!(summary.contains(line), "{line}");
    }
    let agents = ok(&regmarket(&["report", "m/report.json", "--per-agent"], tmp.path()));
    let rows: Vec<&str> = agents.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("a2") && rows[1].starts_with("a3") && rows[2].starts_with("total"));
}

#[test]
fn malformed_report_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), "{ not json").unwrap();
    let out = regmarket(&["report", "bad.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulated_csv_feeds_the_market() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&regmarket(
        &["simulate", "--case", "batch-linear", "--t", "2000", "--out", "d"],
        tmp.path(),
    ));
    ok(&regmarket(
        &[
            "market",
            "batch",
            "--data",
            "d/dataset.csv",
            "--schema",
            "d/schema.json",
            "--out",
            "from_csv",
        ],
        tmp.path(),
    ));
    ok(&regmarket(
        &[
            "market",
            "batch",
            "--case",
            "batch-linear",
            "--t",
            "2000",
            "--out",
            "direct",
        ],
        tmp.path(),
    ));
    let a = ledger_totals(&tmp.path().join("from_csv/ledger.csv"));
    let b = ledger_totals(&tmp.path().join("direct/ledger.csv"));
    assert_eq!(a, b);
}

#[test]
fn config_file_and_strict_audit() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "schema_version = 1\n\n[data]\nscenario = \"batch-linear\"\nt = 1000\n\n[task]\nphi_insample = 0.2\n",
    )
    .unwrap();
    ok(&regmarket(
        &[
            "market",
            "batch",
            "--config",
            "run.toml",
            "--strict-audit",
            "--out",
            "m",
        ],
        tmp.path(),
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("m/report.json")).unwrap()).unwrap();
    assert_eq!(report["phi"], 0.2);
    fs::write(tmp.path().join("bad.toml"), "schema_version = 9\n").unwrap();
    assert_eq!(
        regmarket(&["market", "batch", "--config", "bad.toml"], tmp.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn all_centrals_writes_revenue_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&regmarket(
        &[
            "market",
            "batch",
            "--case",
            "multi-agent-arx",
            "--t",
            "600",
            "--all-centrals",
            "--out",
            "m",
        ],
        tmp.path(),
    ));
    let matrix = fs::read_to_string(tmp.path().join("m/revenue_matrix.csv")).unwrap();
    assert!(matrix.starts_with("payer,payee,revenue"));
    assert!(tmp.path().join("m/a1/report.json").is_file());
    assert!(tmp.path().join("m/a9/ledger.csv").is_file());
}
