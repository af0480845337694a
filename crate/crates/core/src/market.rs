//! Batch, online and out-of-sample regression markets, feature screening,
//! ledgers and the audit of their payment properties.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    contributions_for, loo_variance_allocation, shapley_montecarlo, AllocationPolicy, AllocationVector, ShapleyVariant,
};
use crate::batch::{fit_batch, fit_coalitions, residuals, CoalitionFits};
use crate::data::{AgentId, Dataset};
use crate::design::Coalition;
use crate::error::{MarketError, Result};
use crate::online::{OnlineSession, StreamOptions};
use crate::table::CoalitionLossTable;
use crate::task::{prepare, ModelSource, OosScaling, PreparedTask, ScreeningMethod, ShapleyGame, TaskSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const BUDGET_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Batch,
    Online,
    Oos,
}

impl std::str::FromStr for Mechanism {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Mechanism::Batch),
            "online" => Ok(Mechanism::Online),
            "oos" => Ok(Mechanism::Oos),
            other => Err(MarketError::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub label: String,
    pub market: Mechanism,
    pub payer: AgentId,
    pub payee: AgentId,
    pub feature: String,
    pub amount: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub owner: AgentId,
}

/// Per-step quantities of the online and out-of-sample markets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSeries {
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
    /// Surplus of the coalition game at each step, before clamping.
    pub surplus: Vec<f64>,
    /// What the central agent owes for the step's loss improvement.
    pub central: Vec<f64>,
    /// `[step][support feature]`, in the report's support order.
    pub payments: Vec<Vec<f64>>,
    /// Central-only and grand-coalition loss at each step.
    pub central_loss: Vec<f64>,
    pub full_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLoss {
    pub start: usize,
    pub len: usize,
    pub central_loss: f64,
    pub full_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub central_loss: f64,
    pub full_loss: f64,
    pub windows: Vec<WindowLoss>,
}

impl Consistency {
    pub fn improved_fraction(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let ok = self.windows.iter().filter(|w| w.full_loss <= w.central_loss).count();
        ok as f64 / self.windows.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub jittered: Vec<String>,
    pub duplicates: Vec<(String, String)>,
    pub dummies: Vec<String>,
    pub no_surplus_steps: usize,
    pub unbilled_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditStatus {
    Pass,
    Fail,
    /// Budget gap explained by central contributions through shared terms.
    Shortfall,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub property: String,
    pub status: AuditStatus,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub checks: Vec<AuditCheck>,
}

impl AuditResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != AuditStatus::Fail)
    }

    pub fn check(&self, property: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.property == property)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketReport {
    pub schema_version: u32,
    pub mechanism: Mechanism,
    pub central_agent: AgentId,
    pub target: String,
    pub loss: crate::loss::LossSpec,
    pub phi: f64,
    pub unit_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub policy: AllocationPolicy,
    pub game: ShapleyGame,
    /// Rows (batch) or steps (online, out-of-sample) paid for.
    pub rows: usize,
    pub term_names: Vec<String>,
    pub separable: bool,
    pub central_features: Vec<String>,
    pub support: Vec<FeatureInfo>,
    pub screened_out: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_table: Option<CoalitionLossTable>,
    pub central_loss: f64,
    pub full_loss: f64,
    pub surplus: f64,
    pub no_surplus: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<AllocationVector>,
    /// Nominal payment owed for the loss improvement.
    pub central_payment: f64,
    /// Sum of the ledger, i.e. what support agents actually receive.
    pub total_paid: f64,
    pub payments: BTreeMap<String, f64>,
    pub agent_revenues: BTreeMap<AgentId, f64>,
    pub ledger: Vec<LedgerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<StepSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<Consistency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_coefficients: Option<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
    pub audit: AuditResult,
}

impl MarketReport {
    pub fn payment(&self, feature: &str) -> f64 {
        self.payments.get(feature).copied().unwrap_or(0.0)
    }

    pub fn share(&self, feature: &str) -> Option<f64> {
        self.allocation.as_ref().and_then(|a| a.share(feature))
    }

    /// Support-feature shares that are actually paid out.
    pub fn support_share_sum(&self) -> f64 {
        self.support.iter().filter_map(|f| self.share(&f.name)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_ledger_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "label", "market", "payer", "payee", "feature", "amount"])?;
        for e in &self.ledger {
            out.write_record([
                e.step.to_string(),
                e.label.clone(),
                mechanism_name(e.market).to_string(),
                e.payer.to_string(),
                e.payee.to_string(),
                e.feature.clone(),
                e.amount.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long format: one row per step and support feature.
    pub fn write_cumulative_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "agent", "feature", "amount", "cumulative"])?;
        let mut cumulative = vec![0.0; self.support.len()];
        let mut emit = |step: usize, amounts: &[f64]| -> Result<()> {
            for (i, f) in self.support.iter().enumerate() {
                cumulative[i] += amounts[i];
                out.write_record([
                    step.to_string(),
                    f.owner.to_string(),
                    f.name.clone(),
                    amounts[i].to_string(),
                    cumulative[i].to_string(),
                ])?;
            }
            Ok(())
        };
        match &self.steps {
            Some(s) => {
                for (row, amounts) in s.rows.iter().zip(&s.payments) {
                    emit(*row, amounts)?;
                }
            }
            None => {
                let amounts: Vec<f64> = self.support.iter().map(|f| self.payment(&f.name)).collect();
                emit(0, &amounts)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_loss_table_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["coalition", "loss"])?;
        if let Some(t) = &self.loss_table {
            for (c, l) in t.entries() {
                out.write_record([c.to_string(), l.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn mechanism_name(m: Mechanism) -> &'static str {
    match m {
        Mechanism::Batch => "batch",
        Mechanism::Online => "online",
        Mechanism::Oos => "oos",
    }
}

/// Positive parts of `contributions`, normalized to sum to one over all
/// players (zeros when nothing is positive).
pub fn payout_shares(contributions: &[f64]) -> Vec<f64> {
    let total: f64 = contributions.iter().map(|c| c.max(0.0)).sum();
    if total > 0.0 {
        contributions.iter().map(|c| c.max(0.0) / total).collect()
    } else {
        vec![0.0; contributions.len()]
    }
}

pub fn run_market(dataset: &Dataset, task: &TaskSpec, mechanism: Mechanism) -> Result<MarketReport> {
    match mechanism {
        Mechanism::Batch => clear_batch_market(dataset, task),
        Mechanism::Online => run_online_market(dataset, task),
        Mechanism::Oos => run_oos_market(dataset, task),
    }
}

/// Support features that pass the configured screening rule.
pub fn screen_features(dataset: &Dataset, task: &TaskSpec, method: ScreeningMethod) -> Result<Vec<String>> {
    let prepared = prepare(dataset, task)?;
    screen_prepared(&prepared, task, method)
}

fn screen_prepared(p: &PreparedTask, task: &TaskSpec, method: ScreeningMethod) -> Result<Vec<String>> {
    let spec = task
        .screening
        .clone()
        .unwrap_or_else(|| crate::task::ScreeningSpec::new(method));
    match method {
        ScreeningMethod::CvLoss => {
            let folds = spec.folds.max(2);
            let t = p.y.len();
            if t < folds * (p.design.n_terms() + 1) {
                return Err(MarketError::Parameter(format!(
                    "{t} rows are too few for {folds} folds"
                )));
            }
            let base_cols = p.design.coalition_columns(&p.central, &Coalition::empty())?;
            let base = cv_losses(p, &base_cols, folds, task)?;
            let kept = p
                .support
                .par_iter()
                .map(|f| {
                    let cols = p
                        .design
                        .coalition_columns(&p.central, &Coalition::from_iter([f.clone()]))?;
                    let with = cv_losses(p, &cols, folds, task)?;
                    Ok((f.clone(), exceeds_one_se(&base, &with)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(kept.into_iter().filter(|(_, keep)| *keep).map(|(f, _)| f).collect())
        }
        ScreeningMethod::BurnInShapley => {
            let burn = spec.burn_in;
            if burn > p.y.len() {
                return Err(MarketError::Parameter(format!(
                    "burn-in of {burn} rows exceeds the {} available",
                    p.y.len()
                )));
            }
            let warm = task.warmup.min(burn);
            let (base, players) = p.players(ShapleyGame::SupportOnly);
            let mut session = OnlineSession::new(
                &p.design.slice_rows(0, warm),
                &p.y[..warm],
                &base,
                &players,
                task.init,
                &task.loss,
                task.lambda,
                task.coalition_cap,
            )?;
            let window = p.design.slice_rows(0, burn);
            session.run_stream(&window, &p.y[..burn], warm, StreamOptions::default())?;
            let alloc = crate::allocation::shapley_contributions(&session.ewma_table(), ShapleyVariant::Original)?;
            Ok(alloc
                .features
                .iter()
                .zip(&alloc.contributions)
                .filter(|(_, c)| **c >= 0.0)
                .map(|(f, _)| f.clone())
                .collect())
        }
    }
}

/// Per-row held-out losses over contiguous folds, each predicted by a fit on
/// the others.
fn cv_losses(p: &PreparedTask, cols: &[usize], folds: usize, task: &TaskSpec) -> Result<Vec<f64>> {
    let t = p.y.len();
    let x = p.design.values().select_columns(cols);
    let mut out = Vec::with_capacity(t);
    for k in 0..folds {
        let lo = k * t / folds;
        let hi = (k + 1) * t / folds;
        let train: Vec<usize> = (0..lo).chain(hi..t).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&r| p.y[r]).collect();
        let (beta, _, _, _) = crate::batch::fit_matrix(&xt, &yt, &task.loss, &Default::default())?;
        let xv = x.rows(lo, hi - lo).into_owned();
        for e in residuals(&xv, &p.y[lo..hi], &beta) {
            out.push(task.loss.value(e)?);
        }
    }
    Ok(out)
}

/// Mean paired loss reduction larger than one standard error of its mean.
fn exceeds_one_se(base: &[f64], with: &[f64]) -> bool {
    let n = base.len() as f64;
    let d: Vec<f64> = base.iter().zip(with).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    mean > 0.0 && mean > (var / n).sqrt()
}

struct Prepared {
    task: PreparedTask,
    screened_out: Vec<String>,
}

fn prepare_screened(dataset: &Dataset, task: &TaskSpec, rows: Option<usize>) -> Result<Prepared> {
    let p = prepare(dataset, task)?;
    let Some(spec) = &task.screening else {
        return Ok(Prepared {
            task: p,
            screened_out: Vec::new(),
        });
    };
    // screen on the training rows only when a holdout exists
    let scope = match rows {
        Some(r) if r < p.y.len() => PreparedTask {
            design: p.design.slice_rows(0, r),
            y: p.y[..r].to_vec(),
            dataset: p.dataset.slice(0..r)?,
            ..p.clone()
        },
        _ => p.clone(),
    };
    let keep = screen_prepared(&scope, task, spec.method)?;
    let screened_out = p.support.iter().filter(|f| !keep.contains(f)).cloned().collect();
    Ok(Prepared {
        task: p.restrict_support(&keep)?,
        screened_out,
    })
}

struct Skeleton {
    mechanism: Mechanism,
    phi: f64,
    policy: AllocationPolicy,
}

fn empty_report(p: &Prepared, task: &TaskSpec, sk: Skeleton) -> MarketReport {
    let pt = &p.task;
    MarketReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mechanism: sk.mechanism,
        central_agent: task.central_agent.clone(),
        target: pt.dataset.target().name.clone(),
        loss: task.loss,
        phi: sk.phi,
        unit_scale: task.unit_scale(),
        lambda: None,
        horizon: None,
        policy: sk.policy,
        game: task.game,
        rows: 0,
        term_names: pt.design.term_names(),
        separable: pt.separable(),
        central_features: pt.central.iter().cloned().collect(),
        support: pt
            .support
            .iter()
            .map(|f| FeatureInfo {
                name: f.clone(),
                owner: pt.ownership[f].clone(),
            })
            .collect(),
        screened_out: p.screened_out.clone(),
        loss_table: None,
        central_loss: 0.0,
        full_loss: 0.0,
        surplus: 0.0,
        no_surplus: true,
        allocation: None,
        central_payment: 0.0,
        total_paid: 0.0,
        payments: pt.support.iter().map(|f| (f.clone(), 0.0)).collect(),
        agent_revenues: BTreeMap::new(),
        ledger: Vec::new(),
        steps: None,
        consistency: None,
        full_coefficients: None,
        diagnostics: Diagnostics {
            duplicates: pt.duplicates(),
            dummies: pt.dummies(),
            ..Diagnostics::default()
        },
        audit: AuditResult::default(),
    }
}

/// Losses of the central-only and grand coalitions in a game table.
fn reference_masks(table_players: &[String], central: &BTreeSet<String>, game: ShapleyGame) -> (usize, usize) {
    let full = (1usize << table_players.len()) - 1;
    match game {
        ShapleyGame::SupportOnly => (0, full),
        ShapleyGame::CentralInclusive => {
            let mask = table_players
                .iter()
                .enumerate()
                .filter(|(_, p)| central.contains(*p))
                .fold(0usize, |m, (i, _)| m | (1 << i));
            (mask, full)
        }
    }
}

/// Credits for one billing event, appended to the report's ledger.
struct Biller {
    central: AgentId,
    market: Mechanism,
    /// Index into the allocation's player list for each support feature.
    index: Vec<usize>,
    support: Vec<(String, AgentId)>,
}

impl Biller {
    fn new(report: &MarketReport, players: &[String]) -> Self {
        let index = report
            .support
            .iter()
            .map(|f| {
                players
                    .iter()
                    .position(|p| *p == f.name)
                    .expect("support feature is a player")
            })
            .collect();
        Biller {
            central: report.central_agent.clone(),
            market: report.mechanism,
            index,
            support: report
                .support
                .iter()
                .map(|f| (f.name.clone(), f.owner.clone()))
                .collect(),
        }
    }

    /// Splits `amount` over support features by positive contribution.
    fn bill(
        &self,
        amount: f64,
        contributions: &[f64],
        step: usize,
        label: &str,
        ledger: &mut Vec<LedgerEntry>,
    ) -> Vec<f64> {
        let shares = payout_shares(contributions);
        let mut out = Vec::with_capacity(self.index.len());
        for (i, &j) in self.index.iter().enumerate() {
            let pay = if amount > 0.0 { amount * shares[j] } else { 0.0 };
            out.push(pay);
            if pay > 0.0 {
                ledger.push(LedgerEntry {
                    step,
                    label: label.to_string(),
                    market: self.market,
                    payer: self.central.clone(),
                    payee: self.support[i].1.clone(),
                    feature: self.support[i].0.clone(),
                    amount: pay,
                });
            }
        }
        out
    }
}

fn finalize(mut report: MarketReport) -> MarketReport {
    let mut payments: BTreeMap<String, f64> = report.support.iter().map(|f| (f.name.clone(), 0.0)).collect();
    for e in &report.ledger {
        *payments.entry(e.feature.clone()).or_insert(0.0) += e.amount;
    }
    report.agent_revenues = agent_totals(&report.support, &payments);
    report.total_paid = report.ledger.iter().map(|e| e.amount).sum();
    report.payments = payments;
    report.audit = audit_ledger(&report);
    report
}

fn agent_totals(support: &[FeatureInfo], payments: &BTreeMap<String, f64>) -> BTreeMap<AgentId, f64> {
    let mut out = BTreeMap::new();
    for f in support {
        *out.entry(f.owner.clone()).or_insert(0.0) += payments.get(&f.name).copied().unwrap_or(0.0);
    }
    out
}

pub fn clear_batch_market(dataset: &Dataset, task: &TaskSpec) -> Result<MarketReport> {
    let prepared = prepare_screened(dataset, task, None)?;
    let mut report = empty_report(
        &prepared,
        task,
        Skeleton {
            mechanism: Mechanism::Batch,
            phi: task.phi_insample,
            policy: task.policy,
        },
    );
    let p = &prepared.task;
    let t = p.y.len();
    if task.billed_rows >= t && t > 0 && task.billed_rows > 0 {
        return Err(MarketError::Parameter(format!(
            "{} rows already billed out of {t}",
            task.billed_rows
        )));
    }
    let billed = t - task.billed_rows;
    report.rows = billed;
    let (base, players) = p.players(task.game);
    let (central_mask, full_mask) = reference_masks(&players, &p.central, task.game);
    let volume = billed as f64 * task.phi_insample * task.unit_scale();

    let (contributions, table) = if task.policy == AllocationPolicy::McShapley {
        let fits: std::sync::Mutex<HashMap<Coalition, f64>> = Default::default();
        let oracle = |c: &Coalition| -> Result<f64> {
            let cols = p.design.coalition_columns(&base, c)?;
            let f = fit_batch(&p.design.select_columns(&cols), &p.y, &task.loss)?;
            fits.lock().expect("poisoned").insert(c.clone(), f.loss_star);
            Ok(f.loss_star)
        };
        let alloc = shapley_montecarlo(oracle, &players, task.mc_samples, task.mc_seed)?;
        let mut table = (players.len() <= crate::table::MAX_PLAYERS)
            .then(|| CoalitionLossTable::new(&players))
            .transpose()?;
        let evaluated = fits.into_inner().expect("poisoned");
        if let Some(t) = table.as_mut() {
            for (c, l) in &evaluated {
                t.insert(c, *l)?;
            }
        }
        let central_coalition: Coalition = players.iter().filter(|f| p.central.contains(*f)).cloned().collect();
        let central_loss = match evaluated.get(&central_coalition) {
            Some(l) => *l,
            None => {
                let cols = p.design.coalition_columns(&base, &central_coalition)?;
                fit_batch(&p.design.select_columns(&cols), &p.y, &task.loss)?.loss_star
            }
        };
        let full: Coalition = players.iter().cloned().collect();
        report.central_loss = central_loss;
        report.full_loss = evaluated[&full];
        (alloc, table)
    } else {
        let fits: CoalitionFits = fit_coalitions(&p.design, &p.y, &base, &players, &task.loss, task.coalition_cap)?;
        report.diagnostics.jittered = fits.jittered().iter().map(ToString::to_string).collect();
        let alloc = if task.policy == AllocationPolicy::LooVariance {
            variance_allocation(p, &fits)?
        } else {
            contributions_for(&fits.table, task.policy)?
        };
        report.central_loss = fits.table.loss_mask(central_mask).expect("complete table");
        report.full_loss = fits.table.loss_mask(full_mask).expect("complete table");
        (alloc, Some(fits.table))
    };

    report.surplus = report.central_loss - report.full_loss;
    report.no_surplus = !(report.surplus > 0.0);
    report.central_payment = volume * report.surplus.max(0.0);
    // variance shares split the measured improvement, not their own total
    let game_surplus = if task.policy == AllocationPolicy::LooVariance {
        report.surplus
    } else {
        contributions.normalizer
    };
    let biller = Biller::new(&report, &contributions.features);
    let mut ledger = Vec::new();
    if !report.no_surplus && game_surplus > 0.0 {
        biller.bill(
            volume * game_surplus,
            &contributions.contributions,
            0,
            "batch",
            &mut ledger,
        );
    }
    report.ledger = ledger;
    report.loss_table = table;
    report.allocation = Some(contributions);
    Ok(finalize(report))
}

fn variance_allocation(p: &PreparedTask, fits: &CoalitionFits) -> Result<AllocationVector> {
    if !p.separable() {
        return Err(MarketError::Parameter(
            "variance-decomposition allocation needs a separable linear model".into(),
        ));
    }
    let full = fits.fits.last().expect("at least one coalition");
    let mut coefficients = BTreeMap::new();
    let mut variances = BTreeMap::new();
    for f in &p.support {
        let idx = full
            .term_names
            .iter()
            .position(|n| n == f)
            .ok_or_else(|| MarketError::Parameter(format!("support feature {f} is not a plain linear term")))?;
        coefficients.insert(f.clone(), full.coefficients[idx]);
        let v = &p.dataset.feature(f)?.values;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        variances.insert(f.clone(), var);
    }
    loo_variance_allocation(&coefficients, &variances)
}

fn reject_batch_only_policy(task: &TaskSpec) -> Result<()> {
    if task.policy == AllocationPolicy::McShapley || task.policy == AllocationPolicy::LooVariance {
        return Err(MarketError::Parameter(format!(
            "policy {:?} is only available in the batch market",
            task.policy
        )));
    }
    Ok(())
}

pub fn run_online_market(dataset: &Dataset, task: &TaskSpec) -> Result<MarketReport> {
    reject_batch_only_policy(task)?;
    let prepared = prepare_screened(dataset, task, Some(task.screening.as_ref().map_or(0, |s| s.burn_in)))?;
    let mut report = empty_report(
        &prepared,
        task,
        Skeleton {
            mechanism: Mechanism::Online,
            phi: task.phi_insample,
            policy: task.policy,
        },
    );
    report.lambda = Some(task.lambda);
    let p = &prepared.task;
    let t = p.y.len();
    let warm = match task.init {
        crate::online::InitPolicy::WarmStart { .. } => task.warmup,
        crate::online::InitPolicy::ZeroStart { .. } => 0,
    };
    if warm >= t {
        return Err(MarketError::InsufficientData(format!(
            "warm-up of {warm} rows leaves nothing to stream from {t}"
        )));
    }
    let (base, players) = p.players(task.game);
    let mut session = OnlineSession::new(
        &p.design.slice_rows(0, warm),
        &p.y[..warm],
        &base,
        &players,
        task.init,
        &task.loss,
        task.lambda,
        task.coalition_cap,
    )?;
    let initial = session.ewma_table();
    let trace = session.run_stream(
        &p.design,
        &p.y,
        warm,
        StreamOptions {
            horizon: None,
            record_full_coefficients: true,
        },
    )?;
    let (central_mask, full_mask) = reference_masks(session.players(), &p.central, task.game);
    let ready_from = trace.ready_from.unwrap_or(t - warm);
    let scale = task.phi_insample * task.unit_scale();
    let lambda = task.lambda;
    let k = session.players().len();

    let mut psi = contributions_for(&initial, task.policy)?;
    let biller = Biller::new(&report, &psi.features);
    let mut steps = StepSeries::default();
    let mut ledger = Vec::new();
    let n_masks = 1usize << k;
    for i in 0..(t - warm) {
        let row = warm + i;
        let instant = CoalitionLossTable::from_masks(session.players(), |m| trace.losses[m][i])?;
        let inst = contributions_for(&instant, task.policy)?;
        psi = crate::allocation::online_allocation_update(&psi, &inst, lambda)?;
        let central_loss = trace.ewma[central_mask][i];
        let full_loss = trace.ewma[full_mask][i];
        let surplus = central_loss - full_loss;
        let game_surplus = trace.ewma[0][i] - trace.ewma[n_masks - 1][i];
        let label = p.dataset.timestamps()[row].label.clone();
        let billable = i >= ready_from;
        let nominal = if billable { scale * surplus.max(0.0) } else { 0.0 };
        let pays = if billable && surplus > 0.0 && game_surplus > 0.0 {
            biller.bill(scale * game_surplus, &psi.contributions, row, &label, &mut ledger)
        } else {
            if surplus <= 0.0 {
                report.diagnostics.no_surplus_steps += 1;
            }
            vec![0.0; report.support.len()]
        };
        if !billable {
            report.diagnostics.unbilled_steps += 1;
        }
        steps.rows.push(row);
        steps.labels.push(label);
        steps.surplus.push(surplus);
        steps.central.push(nominal);
        steps.payments.push(pays);
        steps.central_loss.push(central_loss);
        steps.full_loss.push(full_loss);
    }
    report.rows = t - warm;
    report.central_loss = *steps.central_loss.last().expect("at least one step");
    report.full_loss = *steps.full_loss.last().expect("at least one step");
    report.surplus = report.central_loss - report.full_loss;
    report.no_surplus = !(report.surplus > 0.0);
    report.central_payment = steps.central.iter().sum();
    report.loss_table = Some(session.ewma_table());
    report.allocation = Some(psi);
    report.steps = Some(steps);
    report.full_coefficients = trace.full_coefficients;
    report.ledger = ledger;
    Ok(finalize(report))
}

pub fn run_oos_market(dataset: &Dataset, task: &TaskSpec) -> Result<MarketReport> {
    reject_batch_only_policy(task)?;
    let variant = task.oos_policy.shapley_variant().ok_or_else(|| {
        MarketError::Parameter(format!(
            "out-of-sample allocation needs a Shapley policy, got {:?}",
            task.oos_policy
        ))
    })?;
    if task.oos_policy == AllocationPolicy::McShapley {
        return Err(MarketError::Parameter(
            "Monte-Carlo allocation is only available in the batch market".into(),
        ));
    }
    let train = match task.oos.source {
        ModelSource::Batch => task.oos.train_rows.ok_or_else(|| {
            MarketError::Coverage(vec![
                "no trained coalition models: set oos.train_rows for batch models".into()
            ])
        })?,
        ModelSource::Online => task.warmup,
    };
    let prepared = prepare_screened(dataset, task, Some(train))?;
    let mut report = empty_report(
        &prepared,
        task,
        Skeleton {
            mechanism: Mechanism::Oos,
            phi: task.phi_oos,
            policy: task.oos_policy,
        },
    );
    report.horizon = Some(task.horizon);
    let p = &prepared.task;
    let t = p.y.len();
    if train >= t {
        return Err(MarketError::InsufficientData(format!(
            "{train} training rows leave no evaluation period in {t}"
        )));
    }
    let (base, players) = p.players(task.game);
    let n_masks = 1usize << players.len();

    // forecast residuals per coalition, `None` before a forecast is available
    let forecast: Vec<Vec<Option<f64>>> = match task.oos.source {
        ModelSource::Batch => {
            let fits = fit_coalitions(
                &p.design.slice_rows(0, train),
                &p.y[..train],
                &base,
                &players,
                &task.loss,
                task.coalition_cap,
            )?;
            report.diagnostics.jittered = fits.jittered().iter().map(ToString::to_string).collect();
            fits.fits
                .par_iter()
                .zip(fits.columns.par_iter())
                .map(|(f, cols)| {
                    let x = p
                        .design
                        .values()
                        .select_columns(cols)
                        .rows(train, t - train)
                        .into_owned();
                    let beta = nalgebra::DVector::from_column_slice(&f.coefficients);
                    residuals(&x, &p.y[train..], &beta).into_iter().map(Some).collect()
                })
                .collect()
        }
        ModelSource::Online => {
            report.lambda = Some(task.lambda);
            let mut session = OnlineSession::new(
                &p.design.slice_rows(0, train),
                &p.y[..train],
                &base,
                &players,
                task.init,
                &task.loss,
                task.lambda,
                task.coalition_cap,
            )?;
            let trace = session.run_stream(
                &p.design,
                &p.y,
                train,
                StreamOptions {
                    horizon: Some(task.horizon),
                    record_full_coefficients: false,
                },
            )?;
            trace.forecast_residuals.expect("horizon requested")
        }
    };
    let eval: Vec<usize> = (0..t - train)
        .filter(|&i| (0..n_masks).all(|m| forecast[m][i].is_some()))
        .collect();
    if eval.is_empty() {
        return Err(MarketError::Coverage(vec![
            "no step has forecasts from every coalition".into(),
        ]));
    }
    let weight = match task.oos.scaling {
        OosScaling::Volumetric => 1.0,
        OosScaling::PerPeriod => 1.0 / eval.len() as f64,
    };
    let (central_mask, full_mask) = reference_masks(&players, &p.central, task.game);
    let scale = task.phi_oos * task.unit_scale();
    let mut mean = vec![0.0; n_masks];
    let mut steps = StepSeries::default();
    let mut ledger = Vec::new();
    let mut biller_holder = None;
    for &i in &eval {
        let row = train + i;
        let mut raw = vec![0.0; n_masks];
        for m in 0..n_masks {
            raw[m] = task.loss.value(forecast[m][i].expect("filtered"))?;
            mean[m] += raw[m];
        }
        let instant = CoalitionLossTable::from_masks(&players, |m| raw[m] * weight)?;
        let inst = crate::allocation::instant_allocation(&instant, variant)?;
        if biller_holder.is_none() {
            biller_holder = Some(Biller::new(&report, &inst.features));
        }
        let biller = biller_holder.as_ref().expect("just set");
        let surplus = (raw[central_mask] - raw[full_mask]) * weight;
        let game_surplus = (raw[0] - raw[n_masks - 1]) * weight;
        let label = p.dataset.timestamps()[row].label.clone();
        let nominal = scale * surplus.max(0.0);
        let pays = if surplus > 0.0 && game_surplus > 0.0 {
            biller.bill(scale * game_surplus, &inst.contributions, row, &label, &mut ledger)
        } else {
            report.diagnostics.no_surplus_steps += 1;
            vec![0.0; report.support.len()]
        };
        steps.rows.push(row);
        steps.labels.push(label);
        steps.surplus.push(surplus);
        steps.central.push(nominal);
        steps.payments.push(pays);
        steps.central_loss.push(raw[central_mask]);
        steps.full_loss.push(raw[full_mask]);
    }
    let n = eval.len() as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    let table = CoalitionLossTable::from_masks(&players, |m| mean[m])?;
    report.rows = eval.len();
    report.central_loss = mean[central_mask];
    report.full_loss = mean[full_mask];
    report.surplus = report.central_loss - report.full_loss;
    report.no_surplus = !(report.surplus > 0.0);
    report.central_payment = steps.central.iter().sum();
    report.allocation = Some(crate::allocation::shapley_contributions(&table, variant)?);
    report.consistency = Some(consistency(&steps, task.oos.window));
    report.loss_table = Some(table);
    report.steps = Some(steps);
    report.ledger = ledger;
    Ok(finalize(report))
}

fn consistency(steps: &StepSeries, window: usize) -> Consistency {
    let n = steps.central_loss.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let windows = (0..n)
        .step_by(window)
        .filter(|s| s + window <= n)
        .map(|s| WindowLoss {
            start: steps.rows[s],
            len: window,
            central_loss: mean(&steps.central_loss[s..s + window]),
            full_loss: mean(&steps.full_loss[s..s + window]),
        })
        .collect();
    Consistency {
        central_loss: mean(&steps.central_loss),
        full_loss: mean(&steps.full_loss),
        windows,
    }
}

/// Checks the payment properties of a report.
pub fn audit_ledger(report: &MarketReport) -> AuditResult {
    let mut checks = Vec::new();
    let paid: f64 = report.ledger.iter().map(|e| e.amount).sum();
    let explained = !report.separable || report.game == ShapleyGame::CentralInclusive;

    let budget = |nominal: f64, paid: f64| (nominal - paid).abs() <= BUDGET_TOL * nominal.abs().max(f64::MIN_POSITIVE);
    let mut budget_ok = budget(report.central_payment, paid) || (report.central_payment == 0.0 && paid == 0.0);
    let mut detail = format!("nominal {:.6} vs paid {:.6}", report.central_payment, paid);
    if let Some(s) = &report.steps {
        let bad = s
            .central
            .iter()
            .zip(&s.payments)
            .filter(|(c, p)| {
                let sum: f64 = p.iter().sum();
                !(budget(**c, sum) || (**c == 0.0 && sum == 0.0))
            })
            .count();
        if bad > 0 {
            budget_ok = false;
            detail.push_str(&format!("; {bad} unbalanced steps"));
        }
    }
    let status = if budget_ok {
        AuditStatus::Pass
    } else if explained && paid <= report.central_payment * (1.0 + BUDGET_TOL) {
        AuditStatus::Shortfall
    } else {
        AuditStatus::Fail
    };
    checks.push(AuditCheck {
        property: "budget_balance".into(),
        status,
        detail,
        value: Some(report.central_payment - paid),
    });

    let negative = report.ledger.iter().filter(|e| !(e.amount >= 0.0)).count()
        + report.payments.values().filter(|v| !(**v >= 0.0)).count();
    checks.push(AuditCheck {
        property: "individual_rationality".into(),
        status: if negative == 0 {
            AuditStatus::Pass
        } else {
            AuditStatus::Fail
        },
        detail: format!("{negative} negative amounts"),
        value: None,
    });

    let owners: HashMap<&str, &AgentId> = report.support.iter().map(|f| (f.name.as_str(), &f.owner)).collect();
    let misrouted = report
        .ledger
        .iter()
        .filter(|e| e.payer != report.central_agent || owners.get(e.feature.as_str()) != Some(&&e.payee))
        .count();
    checks.push(AuditCheck {
        property: "ledger_matching".into(),
        status: if misrouted == 0 {
            AuditStatus::Pass
        } else {
            AuditStatus::Fail
        },
        detail: format!("{misrouted} entries without a matching payer or owner"),
        value: None,
    });

    let mut per_feature: BTreeMap<&str, f64> = report.support.iter().map(|f| (f.name.as_str(), 0.0)).collect();
    for e in &report.ledger {
        *per_feature.entry(e.feature.as_str()).or_insert(0.0) += e.amount;
    }
    let recomputed: BTreeMap<String, f64> = per_feature.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let agents = agent_totals(&report.support, &recomputed);
    let additive = agents == report.agent_revenues && recomputed == report.payments;
    checks.push(AuditCheck {
        property: "per_agent_additivity".into(),
        status: if additive { AuditStatus::Pass } else { AuditStatus::Fail },
        detail: "agent revenue equals the sum of its feature payments".into(),
        value: None,
    });

    let sym = &report.diagnostics.duplicates;
    if sym.is_empty() {
        checks.push(skipped("symmetry", "no duplicated columns"));
    } else {
        let worst = sym
            .iter()
            .map(|(a, b)| {
                let (pa, pb) = (report.payment(a), report.payment(b));
                (pa - pb).abs() / pa.abs().max(pb.abs()).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max);
        let shapley = matches!(
            report.policy,
            AllocationPolicy::Shapley | AllocationPolicy::ZeroShapley | AllocationPolicy::AbsoluteShapley
        );
        checks.push(AuditCheck {
            property: "symmetry".into(),
            status: if !shapley {
                AuditStatus::Skipped
            } else if worst <= BUDGET_TOL {
                AuditStatus::Pass
            } else {
                AuditStatus::Fail
            },
            detail: format!("{} duplicated pairs, largest relative gap {worst:e}", sym.len()),
            value: Some(worst),
        });
    }

    let dummies = &report.diagnostics.dummies;
    if dummies.is_empty() {
        checks.push(skipped("zero_element", "no dummy features"));
    } else {
        let paid: f64 = dummies.iter().map(|d| report.payment(d)).sum();
        checks.push(AuditCheck {
            property: "zero_element".into(),
            status: if paid == 0.0 {
                AuditStatus::Pass
            } else {
                AuditStatus::Fail
            },
            detail: format!("{} dummy features paid {paid}", dummies.len()),
            value: Some(paid),
        });
    }
    AuditResult { checks }
}

fn skipped(property: &str, detail: &str) -> AuditCheck {
    AuditCheck {
        property: property.into(),
        status: AuditStatus::Skipped,
        detail: detail.into(),
        value: None,
    }
}

/// Every agent owning a series takes a turn as the central agent, with that
/// series as target. Tasks are independent.
pub fn run_all_centrals(dataset: &Dataset, template: &TaskSpec, mechanism: Mechanism) -> Result<Vec<MarketReport>> {
    let mut targets: Vec<(AgentId, String)> = Vec::new();
    for s in std::iter::once(dataset.target()).chain(dataset.features()) {
        if s.origin.is_none() && !targets.iter().any(|(a, _)| *a == s.owner) {
            targets.push((s.owner.clone(), s.name.clone()));
        }
    }
    targets.sort();
    targets
        .par_iter()
        .map(|(agent, target)| {
            let task = TaskSpec {
                central_agent: agent.clone(),
                target: Some(target.clone()),
                ..template.clone()
            };
            run_market(dataset, &task, mechanism)
        })
        .collect()
}

/// Payer → payee revenue matrix across several reports.
pub fn revenue_matrix(reports: &[MarketReport]) -> BTreeMap<AgentId, BTreeMap<AgentId, f64>> {
    let mut out: BTreeMap<AgentId, BTreeMap<AgentId, f64>> = BTreeMap::new();
    for r in reports {
        for (agent, v) in &r.agent_revenues {
            *out.entry(r.central_agent.clone())
                .or_default()
                .entry(agent.clone())
                .or_insert(0.0) += v;
        }
    }
    out
}

pub fn write_revenue_matrix_csv<W: Write>(reports: &[MarketReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["payer", "payee", "revenue"])?;
    for (payer, row) in revenue_matrix(reports) {
        for (payee, v) in row {
            out.write_record([payer.to_string(), payee.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payout_shares_renormalize_positive_parts() {
        let s = payout_shares(&[0.3, -0.1, 0.1]);
        assert!((s[0] - 0.75).abs() < 1e-15 && s[1] == 0.0 && (s[2] - 0.25).abs() < 1e-15);
        assert_eq!(payout_shares(&[-1.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_built_negative_entry_fails_rationality() {
        let report = MarketReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mechanism: Mechanism::Batch,
            central_agent: AgentId::new("a1"),
            target: "y".into(),
            loss: crate::loss::LossSpec::quadratic(),
            phi: 0.1,
            unit_scale: 1.0,
            lambda: None,
            horizon: None,
            policy: AllocationPolicy::Shapley,
            game: ShapleyGame::SupportOnly,
            rows: 10,
            term_names: vec!["1".into(), "x2".into()],
            separable: true,
            central_features: vec![],
            support: vec![FeatureInfo {
                name: "x2".into(),
                owner: AgentId::new("a2"),
            }],
            screened_out: vec![],
            loss_table: None,
            central_loss: 1.0,
            full_loss: 0.5,
            surplus: 0.5,
            no_surplus: false,
            allocation: None,
            central_payment: 0.5,
            total_paid: -0.5,
            payments: BTreeMap::from([("x2".to_string(), -0.5)]),
            agent_revenues: BTreeMap::from([(AgentId::new("a2"), -0.5)]),
            ledger: vec![LedgerEntry {
                step: 0,
                label: "batch".into(),
                market: Mechanism::Batch,
                payer: AgentId::new("a1"),
                payee: AgentId::new("a2"),
                feature: "x2".into(),
                amount: -0.5,
            }],
            steps: None,
            consistency: None,
            full_coefficients: None,
            diagnostics: Diagnostics::default(),
            audit: AuditResult::default(),
        };
        let audit = audit_ledger(&report);
        assert_eq!(audit.check("individual_rationality").unwrap().status, AuditStatus::Fail);
        assert!(!audit.passed());
    }
}
