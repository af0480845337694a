//! `regmarket`: simulate datasets, clear regression markets, render reports.
//!
//! Exit codes: 0 success, 1 configuration or coverage error, 2 I/O or parse
//! error, 3 numeric failure. Audit failures exit 0 unless `--strict-audit`,
//! which turns them into exit 4.

mod config;
mod render;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regression_markets::data::{schema_for, write_csv};
use regression_markets::market::{
    audit_ledger, run_all_centrals, run_market, write_revenue_matrix_csv, MarketReport, Mechanism,
};
use regression_markets::simulation::{generate, run_scenario, CaseId, ScenarioOverrides, ScenarioSpec};
use regression_markets::{AgentId, MarketError};

use config::RunConfig;

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser)]
#[command(name = "regmarket", version, about = "Regression markets for forecasting tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Clear a batch, online or out-of-sample market.
    Market(MarketArgs),
    /// Run every market of a scenario and compare with its ground truth.
    Scenario(ScenarioArgs),
    /// Print tables from a report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "REGMARKET_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct MarketArgs {
    /// batch, online or oos.
    mechanism: String,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a generated scenario as the dataset.
    #[arg(long, conflicts_with = "data")]
    case: Option<String>,
    /// CSV dataset; needs --schema unless the config has one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON column schema, as written by `simulate`.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t: Option<usize>,
    /// Central agent, overriding the config.
    #[arg(long)]
    central: Option<String>,
    /// Run the market once with every agent as the central agent.
    #[arg(long)]
    all_centrals: bool,
    /// Exit 4 when the audit fails.
    #[arg(long)]
    strict_audit: bool,
    #[arg(long, env = "REGMARKET_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t: Option<usize>,
    /// Restrict quantile cases to one nominal level.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ReportArgs {
    path: PathBuf,
    #[arg(long)]
    summary: bool,
    #[arg(long)]
    per_agent: bool,
    #[arg(long)]
    per_feature: bool,
}

enum Failure {
    Market(MarketError),
    Audit(Vec<String>),
}

impl From<MarketError> for Failure {
    fn from(e: MarketError) -> Self {
        Failure::Market(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Market(e.into())
    }
}

fn exit_code(e: &MarketError) -> u8 {
    match e.root() {
        MarketError::Io(_) | MarketError::Csv(_) | MarketError::Json(_) => EXIT_IO,
        MarketError::Schema(_) | MarketError::Row { .. } | MarketError::Ordering { .. } => EXIT_IO,
        MarketError::Numeric(_)
        | MarketError::Singular { .. }
        | MarketError::Convergence { .. }
        | MarketError::NoSurplus(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Market(a) => market(a),
        Command::Scenario(a) => scenario(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Market(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Audit(failed)) => {
            eprintln!("audit failed: {}", failed.join(", "));
            ExitCode::from(EXIT_AUDIT)
        }
    }
}

fn parse_case(name: &str) -> Result<CaseId, MarketError> {
    name.parse()
        .map_err(|e: MarketError| MarketError::Config(e.to_string()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, MarketError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), MarketError> {
    let mut s = text.to_string();
    if !s.ends_with('\n') {
        s.push('\n');
    }
    fs::write(dir.join(name), s)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let case = parse_case(&a.case)?;
    let mut spec = ScenarioSpec::new(case);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.t = a.t.unwrap_or(spec.t);
    spec.noise_sd = a.noise_sd.unwrap_or(spec.noise_sd);
    let (dataset, truth) = generate(&spec).map_err(|e| match e {
        MarketError::Parameter(m) => MarketError::Config(m),
        other => other,
    })?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    write_csv(&dataset, create(dir, "dataset.csv")?)?;
    write_text(dir, "truth.json", &truth.to_json()?)?;
    write_text(
        dir,
        "schema.json",
        &serde_json::to_string_pretty(&schema_for(&dataset)).map_err(MarketError::from)?,
    )?;
    println!("wrote {} rows to {}", dataset.len(), dir.display());
    Ok(())
}

fn write_market_artifacts(dir: &Path, r: &MarketReport) -> Result<(), MarketError> {
    fs::create_dir_all(dir)?;
    write_text(dir, "report.json", &r.to_json()?)?;
    r.write_ledger_csv(create(dir, "ledger.csv")?)?;
    r.write_cumulative_csv(create(dir, "cumulative_revenues.csv")?)?;
    r.write_loss_table_csv(create(dir, "loss_table.csv")?)?;
    write_text(dir, "audit.json", &serde_json::to_string_pretty(&r.audit)?)?;
    Ok(())
}

fn market(a: MarketArgs) -> Result<(), Failure> {
    let mechanism: Mechanism = a.mechanism.parse()?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(case) = &a.case {
        parse_case(case)?;
        cfg.data.scenario = Some(case.clone());
        cfg.data.csv = None;
    }
    if let Some(path) = &a.data {
        cfg.data.csv = Some(path.clone());
        cfg.data.scenario = None;
    }
    if let Some(path) = &a.schema {
        cfg.data.schema_file = Some(path.clone());
        cfg.data.schema = None;
    }
    if a.seed.is_some() {
        cfg.data.seed = a.seed;
    }
    if a.t.is_some() {
        cfg.data.t = a.t;
    }
    if let Some(c) = &a.central {
        cfg.task.central_agent = AgentId::new(c.as_str());
    }
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let (dataset, _) = cfg.load_dataset()?;

    let reports = if a.all_centrals {
        run_all_centrals(&dataset, &cfg.task, mechanism)
    } else {
        run_market(&dataset, &cfg.task, mechanism).map(|r| vec![r])
    };
    let reports = match reports {
        Ok(r) => r,
        Err(e) => {
            if let MarketError::StepFailed { checkpoint, .. } = &e {
                fs::create_dir_all(&dir)?;
                write_text(&dir, "checkpoint.json", checkpoint)?;
            }
            return Err(e.into());
        }
    };
    let mut failed = Vec::new();
    if a.all_centrals {
        for r in &reports {
            write_market_artifacts(&dir.join(r.central_agent.to_string()), r)?;
        }
        write_revenue_matrix_csv(&reports, create(&dir, "revenue_matrix.csv")?)?;
    } else {
        write_market_artifacts(&dir, &reports[0])?;
    }
    for r in &reports {
        // re-audit from the serialized ledger as an independent check
        if !audit_ledger(r).passed() || !r.audit.passed() {
            failed.push(r.central_agent.to_string());
        }
        print!("{}", render::summary(r));
    }
    if a.strict_audit && !failed.is_empty() {
        return Err(Failure::Audit(failed));
    }
    Ok(())
}

fn label_dir(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn scenario(a: ScenarioArgs) -> Result<(), Failure> {
    let case = parse_case(&a.case)?;
    let overrides = ScenarioOverrides {
        t: a.t,
        seed: a.seed,
        tau: a.tau,
        alpha: a.alpha,
        ..Default::default()
    };
    let bundle = run_scenario(case, &overrides)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    write_text(dir, "truth.json", &bundle.truth.to_json()?)?;
    let comparisons = serde_json::json!({
        "spec": bundle.spec,
        "wide_tolerance": bundle.wide_tolerance,
        "comparisons": bundle.comparisons,
    });
    write_text(
        dir,
        "comparisons.json",
        &serde_json::to_string_pretty(&comparisons).map_err(MarketError::from)?,
    )?;
    for run in &bundle.runs {
        write_market_artifacts(&dir.join(label_dir(&run.label)), &run.report)?;
    }
    if bundle.wide_tolerance {
        println!("note: T = {} is small, comparisons are indicative only", bundle.spec.t);
    }
    let mut t = render::Table::new(&["run", "quantity", "expected", "observed"]);
    for c in &bundle.comparisons {
        t.row(vec![
            c.run.clone(),
            c.quantity.clone(),
            format!("{:.4}", c.expected),
            format!("{:.4}", c.observed),
        ]);
    }
    print!("{}", t.render());
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.path)?;
    let r: MarketReport = serde_json::from_str(&text).map_err(MarketError::from)?;
    let none = !(a.summary || a.per_agent || a.per_feature);
    let mut sections = Vec::new();
    if a.summary || none {
        sections.push(render::summary(&r));
    }
    if a.per_feature {
        sections.push(render::per_feature(&r));
    }
    if a.per_agent {
        sections.push(render::per_agent(&r));
    }
    print!("{}", sections.join("\n"));
    Ok(())
}
