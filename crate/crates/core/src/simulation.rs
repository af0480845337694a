//! Seeded data-generating processes for the simulation cases and a synthetic
//! multi-agent stand-in, plus a driver that runs the matching markets.
//!
//! Every random draw comes from a ChaCha8 generator seeded with the scenario
//! seed and switched to a stream derived from the series name, so adding or
//! reordering series never changes the draws of the others.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::allocation::AllocationPolicy;
use crate::data::{Dataset, Series};
use crate::error::{MarketError, Result};
use crate::loss::LossSpec;
use crate::market::{run_all_centrals, run_market, MarketReport, Mechanism};
use crate::online::InitPolicy;
use crate::task::{ModelSource, ModelSpec, OosSpec, ShapleyGame, TaskSpec};

/// Below this many rows, comparisons against ground truth are only indicative.
pub const WIDE_TOLERANCE_ROWS: usize = 1000;
const ARX_BURN_IN: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseId {
    BatchLinear,
    BatchPoly,
    BatchArxQuantile,
    OnlineArx,
    OnlineQuantile,
    MultiAgentArx,
}

impl CaseId {
    pub const ALL: [CaseId; 6] = [
        CaseId::BatchLinear,
        CaseId::BatchPoly,
        CaseId::BatchArxQuantile,
        CaseId::OnlineArx,
        CaseId::OnlineQuantile,
        CaseId::MultiAgentArx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaseId::BatchLinear => "batch-linear",
            CaseId::BatchPoly => "batch-poly",
            CaseId::BatchArxQuantile => "batch-arx-quantile",
            CaseId::OnlineArx => "online-arx",
            CaseId::OnlineQuantile => "online-quantile",
            CaseId::MultiAgentArx => "multi-agent-arx",
        }
    }

    /// Cases whose generating process is our own stand-in rather than a
    /// fully specified one.
    pub fn is_stand_in(self) -> bool {
        matches!(self, CaseId::OnlineArx | CaseId::OnlineQuantile | CaseId::MultiAgentArx)
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaseId {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self> {
        CaseId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| MarketError::Parameter(format!("unknown case `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub case: CaseId,
    pub t: usize,
    pub seed: u64,
    pub noise_sd: f64,
}

impl ScenarioSpec {
    pub fn new(case: CaseId) -> Self {
        ScenarioSpec {
            case,
            t: 10_000,
            seed: 0,
            noise_sd: 0.3,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(MarketError::Parameter("T must be at least 1".into()));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(MarketError::Parameter(format!(
                "noise sd must be positive, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    pub fn wide_tolerance(&self) -> bool {
        self.t < WIDE_TOLERANCE_ROWS
    }
}

/// What the generator knows and the estimators have to find.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub case: CaseId,
    pub seed: u64,
    pub t: usize,
    pub noise_sd: f64,
    /// Names of the terms the coefficients multiply, intercept first.
    pub term_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
    /// Time-varying coefficients, one value per generated row.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub trajectories: BTreeMap<String, Vec<f64>>,
    /// Population losses of the central-only and full models, where closed
    /// forms exist.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub central_loss: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub full_loss: BTreeMap<String, f64>,
    /// Population allocation shares by feature.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub shares: BTreeMap<String, f64>,
    pub stand_in: bool,
    pub notes: Vec<String>,
}

impl GroundTruth {
    fn new(spec: &ScenarioSpec, term_names: &[&str]) -> Self {
        GroundTruth {
            case: spec.case,
            seed: spec.seed,
            t: spec.t,
            noise_sd: spec.noise_sd,
            term_names: term_names.iter().map(|s| s.to_string()).collect(),
            coefficients: None,
            trajectories: BTreeMap::new(),
            central_loss: BTreeMap::new(),
            full_loss: BTreeMap::new(),
            shares: BTreeMap::new(),
            stand_in: spec.case.is_stand_in(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for a named series.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

fn gaussian(seed: u64, name: &str, n: usize, sd: f64) -> Vec<f64> {
    let mut rng = substream(seed, name);
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform(seed: u64, name: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = substream(seed, name);
    let dist = Uniform::new(lo, hi).expect("valid bounds");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn normal_pdf(z: f64) -> f64 {
    StdNormal::standard().pdf(z)
}

fn normal_quantile(p: f64) -> f64 {
    StdNormal::standard().inverse_cdf(p)
}

/// Expected pinball loss at the true `tau`-quantile of a centred normal.
pub fn gaussian_pinball_loss(sd: f64, tau: f64) -> f64 {
    sd * normal_pdf(normal_quantile(tau))
}

fn tau_key(tau: f64) -> String {
    format!("tau={tau}")
}

/// Generates the dataset of a scenario together with its ground truth.
pub fn generate(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    match spec.case {
        CaseId::BatchLinear => batch_linear(spec),
        CaseId::BatchPoly => batch_poly(spec),
        CaseId::BatchArxQuantile => batch_arx(spec),
        CaseId::OnlineArx => online_arx(spec),
        CaseId::OnlineQuantile => online_quantile(spec),
        CaseId::MultiAgentArx => multi_agent(spec),
    }
}

fn four_features(spec: &ScenarioSpec) -> [Vec<f64>; 4] {
    ["x1", "x2", "x3", "x4"].map(|name| gaussian(spec.seed, name, spec.t, 1.0))
}

fn owned(x: [Vec<f64>; 4]) -> Vec<Series> {
    let [x1, x2, x3, x4] = x;
    vec![
        Series::new("x1", "a1", x1),
        Series::new("x2", "a2", x2),
        Series::new("x3", "a3", x3),
        Series::new("x4", "a3", x4),
    ]
}

fn batch_linear(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let beta = [0.1, -0.3, 0.5, -0.9, 0.2];
    let x = four_features(spec);
    let noise = gaussian(spec.seed, "noise", spec.t, spec.noise_sd);
    let y: Vec<f64> = (0..spec.t)
        .map(|i| beta[0] + (0..4).map(|k| beta[k + 1] * x[k][i]).sum::<f64>() + noise[i])
        .collect();
    let mut truth = GroundTruth::new(spec, &["1", "x1", "x2", "x3", "x4"]);
    truth.coefficients = Some(beta.to_vec());
    let s2 = spec.noise_sd * spec.noise_sd;
    let gains: Vec<f64> = beta[2..].iter().map(|b| b * b).collect();
    let total: f64 = gains.iter().sum();
    truth.central_loss.insert("quadratic".into(), s2 + total);
    truth.full_loss.insert("quadratic".into(), s2);
    for (name, g) in ["x2", "x3", "x4"].iter().zip(&gains) {
        truth.shares.insert(name.to_string(), g / total);
    }
    truth
        .notes
        .push("independent unit-variance features: leave-one-out and Shapley shares coincide".into());
    let ds = Dataset::indexed(Series::new("y", "a1", y), owned(x))?;
    Ok((ds, truth))
}

fn batch_poly(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let x = four_features(spec);
    let noise = gaussian(spec.seed, "noise", spec.t, spec.noise_sd);
    let beta = [0.2, -0.4, 0.6, 0.3, 0.1, -0.4];
    let y: Vec<f64> = (0..spec.t)
        .map(|i| {
            let (x1, x2, x3) = (x[0][i], x[1][i], x[2][i]);
            beta[0] + beta[1] * x1 + beta[2] * x2 + beta[3] * x3 + beta[4] * x2 * x2 + beta[5] * x1 * x3 + noise[i]
        })
        .collect();
    let mut truth = GroundTruth::new(spec, &["1", "x1", "x2", "x3", "x2^2", "x1*x3"]);
    truth.coefficients = Some(beta.to_vec());
    let s2 = spec.noise_sd * spec.noise_sd;
    // x2^2 has variance 2, x1*x3 has variance 1, all terms uncorrelated
    let v1 = beta[1] * beta[1];
    let v2 = beta[2] * beta[2] + 2.0 * beta[4] * beta[4];
    let v3 = beta[3] * beta[3];
    let v13 = beta[5] * beta[5];
    truth.central_loss.insert("quadratic".into(), s2 + v2 + v3 + v13);
    truth.full_loss.insert("quadratic".into(), s2);
    // the interaction value splits evenly between x1 and x3 in the game where
    // the central feature is also a player
    let normalizer = v1 + v2 + v3 + v13;
    truth.shares.insert("x1".into(), (v1 + v13 / 2.0) / normalizer);
    truth.shares.insert("x2".into(), v2 / normalizer);
    truth.shares.insert("x3".into(), (v3 + v13 / 2.0) / normalizer);
    truth.notes.push(format!(
        "support-only benchmark payment per unit phi and row: {:.4}",
        v2 + v3 + v13
    ));
    let ds = Dataset::indexed(Series::new("y", "a1", y), owned(x))?;
    Ok((ds, truth))
}

/// `y_t = b0 + b1 y_{t-1} + sum_k bk x_{k,t-1} + noise_t`, started from the
/// stationary mean and run through a discarded burn-in.
fn arx_series(spec: &ScenarioSpec, beta: impl Fn(usize) -> [f64; 5], x: &[Vec<f64>; 3], noise: &[f64]) -> Vec<f64> {
    let b = beta(0);
    let mut prev = b[0] / (1.0 - b[1]).max(1e-3);
    let warm = gaussian(spec.seed, "noise-burn-in", ARX_BURN_IN, spec.noise_sd);
    for e in &warm {
        prev = b[0] + b[1] * prev + e;
    }
    let mut y = Vec::with_capacity(spec.t);
    for i in 0..spec.t {
        let b = beta(i);
        let exo = if i == 0 {
            0.0
        } else {
            (0..3).map(|k| b[k + 2] * x[k][i - 1]).sum()
        };
        let v = b[0] + b[1] * prev + exo + noise[i];
        y.push(v);
        prev = v;
    }
    y
}

fn arx_dataset(y: Vec<f64>, x: [Vec<f64>; 3]) -> Result<Dataset> {
    let [x2, x3, x4] = x;
    Dataset::indexed(
        Series::new("y", "a1", y),
        vec![
            Series::new("x2", "a2", x2),
            Series::new("x3", "a3", x3),
            Series::new("x4", "a3", x4),
        ],
    )
}

const ARX_TERMS: [&str; 5] = ["1", "y_lag1", "x2_lag1", "x3_lag1", "x4_lag1"];
pub const ARX_TAUS: [f64; 2] = [0.1, 0.75];

fn batch_arx(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let beta = [0.1, 0.92, -0.5, 0.3, -0.1];
    let x = ["x2", "x3", "x4"].map(|n| gaussian(spec.seed, n, spec.t, 1.0));
    let noise = gaussian(spec.seed, "noise", spec.t, spec.noise_sd);
    let y = arx_series(spec, |_| beta, &x, &noise);
    let mut truth = GroundTruth::new(spec, &ARX_TERMS);
    truth.coefficients = Some(beta.to_vec());
    let sd_central = (spec.noise_sd.powi(2) + beta[2..].iter().map(|b| b * b).sum::<f64>()).sqrt();
    for tau in ARX_TAUS {
        truth
            .central_loss
            .insert(tau_key(tau), gaussian_pinball_loss(sd_central, tau));
        truth
            .full_loss
            .insert(tau_key(tau), gaussian_pinball_loss(spec.noise_sd, tau));
    }
    truth.notes.push(
        "closed-form pinball losses assume Gaussian residuals; the central-only residual carries the omitted exogenous terms"
            .into(),
    );
    Ok((arx_dataset(y, x)?, truth))
}

/// Smooth stand-in trajectories for the time-varying ARX case.
pub fn online_arx_beta(i: usize, t: usize) -> [f64; 5] {
    let s = i as f64 / t as f64;
    [
        0.1,
        0.9 + 0.05 * (2.0 * PI * s).sin(),
        -0.3 - 0.4 * s,
        0.3 + 0.25 * (4.0 * PI * s).sin(),
        -0.25 * (-3.0 * s).exp(),
    ]
}

fn online_arx(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let x = ["x2", "x3", "x4"].map(|n| gaussian(spec.seed, n, spec.t, 1.0));
    let noise = gaussian(spec.seed, "noise", spec.t, spec.noise_sd);
    let t = spec.t;
    let y = arx_series(spec, |i| online_arx_beta(i, t), &x, &noise);
    let mut truth = GroundTruth::new(spec, &ARX_TERMS);
    for (k, name) in ARX_TERMS.iter().enumerate() {
        truth
            .trajectories
            .insert(name.to_string(), (0..t).map(|i| online_arx_beta(i, t)[k]).collect());
    }
    truth
        .notes
        .push("stand-in trajectories: sinusoids, a linear ramp and an exponential decay".into());
    Ok((arx_dataset(y, x)?, truth))
}

/// Stand-in coefficients of the heteroskedastic quantile case; the last
/// entry scales the noise through `x4`.
pub fn online_quantile_beta(i: usize, t: usize) -> [f64; 5] {
    let s = i as f64 / t as f64;
    [
        0.2,
        0.6,
        -0.5 - 0.1 * (2.0 * PI * s).sin(),
        0.5 - 0.1 * (2.0 * PI * s).cos(),
        1.5 + 0.5 * (2.0 * PI * s).sin(),
    ]
}

pub const QUANTILE_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

fn online_quantile(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let t = spec.t;
    let x1 = gaussian(spec.seed, "x1", t, 1.0);
    let x2 = gaussian(spec.seed, "x2", t, 1.0);
    let x3 = gaussian(spec.seed, "x3", t, 1.0);
    let x4 = uniform(spec.seed, "x4", t, 0.5, 1.5);
    let noise = gaussian(spec.seed, "noise", t, spec.noise_sd);
    let y: Vec<f64> = (0..t)
        .map(|i| {
            let b = online_quantile_beta(i, t);
            b[0] + b[1] * x1[i] + b[2] * x2[i] + b[3] * x3[i] + b[4] * x4[i] * noise[i]
        })
        .collect();
    let mut truth = GroundTruth::new(spec, &["1", "x1", "x2", "x3", "x4"]);
    for (k, name) in truth.term_names.clone().iter().enumerate() {
        truth
            .trajectories
            .insert(name.clone(), (0..t).map(|i| online_quantile_beta(i, t)[k]).collect());
    }
    for tau in QUANTILE_TAUS {
        // the tau-quantile is linear in x4 with slope b4 * sd * z_tau
        let z = if tau == 0.5 { 0.0 } else { normal_quantile(tau) };
        truth.shares.insert(format!("x4@{}", tau_key(tau)), z.abs());
    }
    truth
        .notes
        .push("x4 enters the conditional quantile with slope proportional to |z_tau|; zero at the median".into());
    let ds = Dataset::indexed(
        Series::new("y", "a1", y),
        vec![
            Series::new("x1", "a1", x1),
            Series::new("x2", "a2", x2),
            Series::new("x3", "a3", x3),
            Series::new("x4", "a3", x4),
        ],
    )?;
    Ok((ds, truth))
}

/// Site coordinates (latitude, longitude) of the nine agents.
pub const SITES: [(f64, f64); 9] = [
    (34.248, -79.75),
    (34.02, -79.537),
    (33.925, -79.958),
    (34.732, -82.122),
    (34.556, -81.889),
    (34.334, -82.133),
    (33.136, -80.857),
    (33.112, -80.665),
    (32.641, -80.504),
];

fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

const VAR_SELF: f64 = 0.55;
const VAR_CROSS: f64 = 0.6;
const VAR_RANGE_KM: f64 = 60.0;
const VAR_ROW_CAP: f64 = 0.95;
const CAPACITY_MEAN: f64 = 0.3;
const CAPACITY_SCALE: f64 = 0.1;

/// Transition matrix with cross effects decaying in distance, rows scaled so
/// that absolute row sums stay below one.
pub fn var_transition() -> DMatrix<f64> {
    let n = SITES.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = if i == j {
                VAR_SELF
            } else {
                VAR_CROSS * (-haversine_km(SITES[i], SITES[j]) / VAR_RANGE_KM).exp()
            };
        }
        let row: f64 = a.row(i).iter().map(|v| v.abs()).sum();
        if row > VAR_ROW_CAP {
            a.row_mut(i).scale_mut(VAR_ROW_CAP / row);
        }
    }
    a
}

pub fn agent_name(i: usize) -> String {
    format!("a{}", i + 1)
}

fn multi_agent(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    let n = SITES.len();
    let a = var_transition();
    let shocks: Vec<Vec<f64>> = (0..n)
        .map(|k| gaussian(spec.seed, &format!("y{}", k + 1), spec.t + ARX_BURN_IN, 1.0))
        .collect();
    let mut z = vec![0.0; n];
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.t); n];
    for step in 0..spec.t + ARX_BURN_IN {
        let next: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)] * z[j]).sum::<f64>() + shocks[i][step])
            .collect();
        z = next;
        if step >= ARX_BURN_IN {
            for i in 0..n {
                let v = CAPACITY_MEAN + CAPACITY_SCALE * spec.noise_sd / 0.3 * z[i];
                out[i].push(v.clamp(0.0, 1.0));
            }
        }
    }
    let mut series = out
        .into_iter()
        .enumerate()
        .map(|(i, v)| Series::new(format!("y{}", i + 1), agent_name(i), v));
    let target = series.next().expect("nine sites");
    let ds = Dataset::indexed(target, series.collect())?;
    let mut truth = GroundTruth::new(spec, &[]);
    truth.term_names = (0..n).map(|i| format!("y{}", i + 1)).collect();
    truth.coefficients = Some(a.transpose().iter().copied().collect());
    truth.notes.push(format!(
        "latent VAR(1), row-major transition in coefficients; series = clamp({CAPACITY_MEAN} + {CAPACITY_SCALE} * latent, 0, 1)"
    ));
    truth.notes.push(format!(
        "self effect {VAR_SELF}, cross effect {VAR_CROSS} * exp(-km / {VAR_RANGE_KM}), rows capped at {VAR_ROW_CAP}"
    ));
    Ok((ds, truth))
}

/// Overrides applied on top of a case's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOverrides {
    pub t: Option<usize>,
    pub seed: Option<u64>,
    pub noise_sd: Option<f64>,
    /// Restricts quantile cases to a single nominal level.
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
}

impl ScenarioOverrides {
    pub fn apply(&self, case: CaseId) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(case);
        if let Some(t) = self.t {
            spec.t = t;
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(sd) = self.noise_sd {
            spec.noise_sd = sd;
        }
        spec
    }
}

/// A number the run produced next to the number it should be close to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run: String,
    pub quantity: String,
    pub expected: f64,
    pub observed: f64,
}

impl Comparison {
    pub fn relative_error(&self) -> f64 {
        (self.observed - self.expected).abs() / self.expected.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub label: String,
    pub task: TaskSpec,
    pub report: MarketReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBundle {
    pub spec: ScenarioSpec,
    pub truth: GroundTruth,
    pub wide_tolerance: bool,
    pub runs: Vec<ScenarioRun>,
    pub comparisons: Vec<Comparison>,
}

impl ScenarioBundle {
    pub fn run(&self, label: &str) -> Option<&MarketReport> {
        self.runs.iter().find(|r| r.label == label).map(|r| &r.report)
    }
}

pub const BATCH_ARX_ALPHA: f64 = 0.02;
pub const ONLINE_QUANTILE_ALPHA: f64 = 0.2;

fn arx_model() -> ModelSpec {
    ModelSpec {
        inputs: Some(vec!["x2".into(), "x3".into(), "x4".into()]),
        target_lags: vec![1],
        feature_lags: vec![1],
        ..ModelSpec::linear()
    }
}

/// The task each case posts, one per market run, with its run label.
pub fn case_tasks(spec: &ScenarioSpec, overrides: &ScenarioOverrides) -> Result<Vec<(String, Mechanism, TaskSpec)>> {
    let wide = spec.wide_tolerance();
    let warmup = if wide { (spec.t / 2).max(1) } else { 100 };
    let taus = |defaults: &[f64]| overrides.tau.map_or_else(|| defaults.to_vec(), |t| vec![t]);
    let mut out = Vec::new();
    match spec.case {
        CaseId::BatchLinear => {
            for (label, policy) in [
                ("shapley", AllocationPolicy::Shapley),
                ("loo", AllocationPolicy::LooVariance),
            ] {
                let task = TaskSpec {
                    phi_insample: 0.1,
                    policy,
                    ..TaskSpec::default()
                };
                out.push((label.to_string(), Mechanism::Batch, task));
            }
        }
        CaseId::BatchPoly => {
            let task = TaskSpec {
                model: ModelSpec {
                    degree: 2,
                    interactions: true,
                    terms: ["x1", "x2", "x3", "x2^2", "x1*x3"].map(String::from).to_vec(),
                    inputs: Some(["x1", "x2", "x3"].map(String::from).to_vec()),
                    ..ModelSpec::linear()
                },
                phi_insample: 0.1,
                game: ShapleyGame::CentralInclusive,
                ..TaskSpec::default()
            };
            out.push(("shapley".into(), Mechanism::Batch, task));
        }
        CaseId::BatchArxQuantile => {
            let alpha = overrides.alpha.unwrap_or(BATCH_ARX_ALPHA);
            for tau in taus(&ARX_TAUS) {
                let task = TaskSpec {
                    model: arx_model(),
                    loss: LossSpec::smooth_quantile(tau, alpha)?,
                    phi_insample: 1.0,
                    ..TaskSpec::default()
                };
                out.push((tau_key(tau), Mechanism::Batch, task));
            }
        }
        CaseId::OnlineArx => {
            let task = TaskSpec {
                model: arx_model(),
                phi_insample: 0.1,
                lambda: 0.998,
                warmup,
                init: InitPolicy::WarmStart { min_length: warmup },
                ..TaskSpec::default()
            };
            out.push(("online".into(), Mechanism::Online, task));
        }
        CaseId::OnlineQuantile => {
            let alpha = overrides.alpha.unwrap_or(ONLINE_QUANTILE_ALPHA);
            for tau in taus(&QUANTILE_TAUS) {
                let task = TaskSpec {
                    loss: LossSpec::smooth_quantile(tau, alpha)?,
                    phi_insample: 1.0,
                    lambda: 0.999,
                    warmup,
                    init: InitPolicy::WarmStart { min_length: warmup },
                    ..TaskSpec::default()
                };
                out.push((tau_key(tau), Mechanism::Online, task));
            }
        }
        CaseId::MultiAgentArx => {
            let train = (spec.t / 2).max(1);
            let template = TaskSpec {
                model: ModelSpec {
                    target_lags: vec![1, 2],
                    feature_lags: vec![1],
                    ..ModelSpec::linear()
                },
                phi_insample: 0.5,
                phi_oos: 1.5,
                percent_points: true,
                billed_rows: train,
                oos: OosSpec {
                    source: ModelSource::Batch,
                    train_rows: Some(train),
                    window: if wide { (spec.t / 10).max(1) } else { 500 },
                    ..OosSpec::default()
                },
                ..TaskSpec::default()
            };
            out.push(("batch".into(), Mechanism::Batch, template.clone()));
            out.push(("oos".into(), Mechanism::Oos, template));
        }
    }
    Ok(out)
}

/// Generates the scenario, runs every market it calls for and compares the
/// outcome with the ground truth.
pub fn run_scenario(case: CaseId, overrides: &ScenarioOverrides) -> Result<ScenarioBundle> {
    let spec = overrides.apply(case);
    let (dataset, truth) = generate(&spec)?;
    let tasks = case_tasks(&spec, overrides)?;
    let runs = tasks
        .into_par_iter()
        .map(|(label, mechanism, task)| -> Result<Vec<ScenarioRun>> {
            if case == CaseId::MultiAgentArx {
                let reports = run_all_centrals(&dataset, &task, mechanism)?;
                Ok(reports
                    .into_iter()
                    .map(|r| ScenarioRun {
                        label: format!("{label}:{}", r.central_agent),
                        task: TaskSpec {
                            central_agent: r.central_agent.clone(),
                            ..task.clone()
                        },
                        report: r,
                    })
                    .collect())
            } else {
                let report = run_market(&dataset, &task, mechanism)?;
                Ok(vec![ScenarioRun { label, task, report }])
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let comparisons = compare(&spec, &truth, &runs);
    Ok(ScenarioBundle {
        wide_tolerance: spec.wide_tolerance(),
        spec,
        truth,
        runs,
        comparisons,
    })
}

fn compare(spec: &ScenarioSpec, truth: &GroundTruth, runs: &[ScenarioRun]) -> Vec<Comparison> {
    let mut out = Vec::new();
    let mut push = |run: &str, quantity: &str, expected: f64, observed: f64| {
        out.push(Comparison {
            run: run.to_string(),
            quantity: quantity.to_string(),
            expected,
            observed,
        })
    };
    for run in runs {
        let r = &run.report;
        let key = match spec.case {
            CaseId::BatchArxQuantile => run.label.clone(),
            _ => "quadratic".to_string(),
        };
        if matches!(
            spec.case,
            CaseId::BatchLinear | CaseId::BatchPoly | CaseId::BatchArxQuantile
        ) {
            if let Some(v) = truth.central_loss.get(&key) {
                push(&run.label, "central_loss", *v, r.central_loss);
            }
            if let Some(v) = truth.full_loss.get(&key) {
                push(&run.label, "full_loss", *v, r.full_loss);
            }
        }
        if matches!(spec.case, CaseId::BatchLinear | CaseId::BatchPoly) {
            for (feature, share) in &truth.shares {
                if let Some(s) = r.share(feature) {
                    push(&run.label, &format!("share:{feature}"), *share, s);
                }
            }
        }
        if spec.case == CaseId::BatchLinear {
            let expected = 0.1 * spec.t as f64 * (truth.central_loss["quadratic"] - truth.full_loss["quadratic"]);
            push(&run.label, "central_payment", expected, r.central_payment);
        }
        if spec.case == CaseId::BatchPoly {
            let support: f64 = ["x2", "x3"].iter().filter_map(|f| truth.shares.get(*f)).sum();
            push(&run.label, "support_share_sum", support, r.support_share_sum());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_case_is_a_parameter_error() {
        assert!(matches!("case-9".parse::<CaseId>(), Err(MarketError::Parameter(_))));
        for c in CaseId::ALL {
            assert_eq!(c.name().parse::<CaseId>().unwrap(), c);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for case in CaseId::ALL {
            let spec = ScenarioSpec::new(case).with_t(300).with_seed(11);
            let (a, ta) = generate(&spec).unwrap();
            let (b, tb) = generate(&spec).unwrap();
            assert_eq!(a, b, "{case}");
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn substreams_ignore_order() {
        let a = gaussian(3, "x2", 5, 1.0);
        let _ = gaussian(3, "x1", 5, 1.0);
        assert_eq!(a, gaussian(3, "x2", 5, 1.0));
        assert_ne!(a, gaussian(3, "x3", 5, 1.0));
    }

    #[test]
    fn analytic_truth_for_linear_case() {
        let (_, truth) = generate(&ScenarioSpec::new(CaseId::BatchLinear).with_t(10)).unwrap();
        assert!((truth.central_loss["quadratic"] - 1.19).abs() < 1e-12);
        assert!((truth.full_loss["quadratic"] - 0.09).abs() < 1e-12);
        assert!((truth.shares["x2"] - 0.25 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn quantile_helpers() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.1) + 1.2815515655446004).abs() < 1e-9);
        // pinball loss of N(0, 0.3) at its own 10% quantile
        assert!((gaussian_pinball_loss(0.3, 0.1) - 0.3 * normal_pdf(1.2815515655446004)).abs() < 1e-9);
    }

    #[test]
    fn transition_is_stable() {
        let a = var_transition();
        for i in 0..9 {
            assert!(a.row(i).iter().map(|v| v.abs()).sum::<f64>() <= VAR_ROW_CAP + 1e-12);
        }
        // nearby sites influence each other more than distant ones
        assert!(a[(0, 1)] > a[(0, 3)]);
    }

    #[test]
    fn invalid_spec() {
        let mut s = ScenarioSpec::new(CaseId::BatchLinear);
        s.noise_sd = 0.0;
        assert!(matches!(generate(&s), Err(MarketError::Parameter(_))));
        assert!(matches!(generate(&s.with_t(0)), Err(MarketError::Parameter(_))));
    }
}
