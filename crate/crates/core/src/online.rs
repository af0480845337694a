//! Recursive Newton-Raphson estimation with exponential forgetting, tracked
//! for every coalition in lockstep.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{fit_matrix, FitOptions};
use crate::design::{AugmentedDesign, Coalition};
use crate::error::{MarketError, Result};
use crate::loss::{EwmaLoss, LossSpec};
use crate::table::CoalitionLossTable;

pub const SNAPSHOT_VERSION: u32 = 1;
const SYMMETRIZE_EVERY: u64 = 1000;
const CONDITION_LIMIT: f64 = 1e14;
const DEFAULT_WARMUP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Batch fit on a warm-up slice of at least `min_length` rows.
    WarmStart { min_length: usize },
    /// Start from zero and defer the first solve until `min_steps` rows
    /// (default `2n`) have been seen and the memory factorizes.
    ZeroStart { min_steps: Option<usize> },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::WarmStart {
            min_length: DEFAULT_WARMUP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState {
    coefficients: DVector<f64>,
    memory: DMatrix<f64>,
    /// Accumulated `x h1` while a zero-started state waits for rank.
    pending: Option<DVector<f64>>,
    min_steps: u64,
    ewma_loss: EwmaLoss,
    step_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Prior residual, computed with the pre-update coefficients.
    pub residual: f64,
    pub loss: f64,
}

pub fn init_state(
    design: &AugmentedDesign,
    y: &[f64],
    policy: InitPolicy,
    spec: &LossSpec,
    lambda: f64,
) -> Result<OnlineState> {
    init_matrix(design.values(), y, policy, spec, lambda)
}

pub(crate) fn init_matrix(
    x: &DMatrix<f64>,
    y: &[f64],
    policy: InitPolicy,
    spec: &LossSpec,
    lambda: f64,
) -> Result<OnlineState> {
    spec.validate()?;
    let n = x.ncols();
    let ewma = EwmaLoss::new(lambda, 0.0)?;
    match policy {
        InitPolicy::ZeroStart { min_steps } => Ok(OnlineState {
            coefficients: DVector::zeros(n),
            memory: DMatrix::zeros(n, n),
            pending: Some(DVector::zeros(n)),
            min_steps: min_steps.unwrap_or(2 * n) as u64,
            ewma_loss: ewma,
            step_count: 0,
        }),
        InitPolicy::WarmStart { min_length } => {
            let len = x.nrows();
            if len < n || len < min_length {
                return Err(MarketError::Parameter(format!(
                    "warm-up slice of {len} rows is shorter than max({n} terms, {min_length})"
                )));
            }
            let (beta, loss, _, _) = fit_matrix(x, y, spec, &FitOptions::default())?;
            // the recursion replayed over the slice with the fitted residuals
            let mut memory = DMatrix::zeros(n, n);
            for (r, yr) in y.iter().enumerate() {
                let row = x.row(r).transpose();
                let eps = yr - row.dot(&beta);
                memory *= lambda;
                memory.ger(spec.h2_unchecked(eps), &row, &row, 1.0);
            }
            symmetrize(&mut memory);
            let mut ewma_loss = EwmaLoss::new(lambda, loss)?;
            ewma_loss.count = len as u64;
            Ok(OnlineState {
                coefficients: beta,
                memory,
                pending: None,
                min_steps: 0,
                ewma_loss,
                step_count: 0,
            })
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn factor(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = m.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if lo > 0.0 && (hi / lo).powi(2) < CONDITION_LIMIT {
        Some(chol)
    } else {
        None
    }
}

impl OnlineState {
    pub fn coefficients(&self) -> &[f64] {
        self.coefficients.as_slice()
    }

    pub fn memory(&self) -> &DMatrix<f64> {
        &self.memory
    }

    pub fn ewma_loss(&self) -> EwmaLoss {
        self.ewma_loss
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// False while a zero-started state is still accumulating rank.
    pub fn is_ready(&self) -> bool {
        self.pending.is_none()
    }

    pub fn n_terms(&self) -> usize {
        self.coefficients.len()
    }

    pub fn forecast(&self, x_row: &[f64]) -> f64 {
        self.coefficients.iter().zip(x_row).map(|(b, x)| b * x).sum()
    }

    /// One Newton-Raphson step: prior residual, memory update, coefficient
    /// update, then the EWMA loss.
    pub fn step(&mut self, x_row: &[f64], y: f64, spec: &LossSpec, lambda: f64) -> Result<StepOutcome> {
        let n = self.coefficients.len();
        if x_row.len() != n {
            return Err(MarketError::Parameter(format!(
                "row of {} terms for {n} coefficients",
                x_row.len()
            )));
        }
        if !y.is_finite() || x_row.iter().any(|v| !v.is_finite()) {
            return Err(MarketError::Numeric(format!(
                "non-finite input at step {}",
                self.step_count + 1
            )));
        }
        let x = DVector::from_column_slice(x_row);
        let eps = y - self.coefficients.dot(&x);
        let loss = spec.value_unchecked(eps);
        let h1 = spec.h1_unchecked(eps);
        let h2 = spec.h2_unchecked(eps);
        if !loss.is_finite() {
            return Err(MarketError::Numeric(format!(
                "loss {loss} at step {}",
                self.step_count + 1
            )));
        }
        self.step_count += 1;
        self.memory *= lambda;
        self.memory.ger(h2, &x, &x, 1.0);
        if self.step_count.is_multiple_of(SYMMETRIZE_EVERY) {
            symmetrize(&mut self.memory);
        }
        let singular = |step: u64, msg: &str| MarketError::Singular {
            step: Some(step as usize),
            msg: msg.to_string(),
        };
        match self.pending.as_mut() {
            Some(g) => {
                *g *= lambda;
                g.axpy(h1, &x, 1.0);
                if self.step_count >= self.min_steps {
                    if let Some(chol) = factor(&self.memory) {
                        self.coefficients += chol.solve(g);
                        self.pending = None;
                    }
                }
            }
            None => {
                let chol = self
                    .memory
                    .clone()
                    .cholesky()
                    .ok_or_else(|| singular(self.step_count, "memory matrix is not positive definite"))?;
                self.coefficients += chol.solve(&(x * h1));
                if self.step_count.is_multiple_of(SYMMETRIZE_EVERY) && factor(&self.memory).is_none() {
                    return Err(singular(self.step_count, "memory matrix is ill-conditioned"));
                }
            }
        }
        self.ewma_loss = self.ewma_loss.update_unchecked(loss);
        Ok(StepOutcome { residual: eps, loss })
    }
}

pub fn online_step(
    state: &OnlineState,
    x_row: &[f64],
    y: f64,
    spec: &LossSpec,
    lambda: f64,
) -> Result<(OnlineState, StepOutcome)> {
    let mut next = state.clone();
    let out = next.step(x_row, y, spec, lambda)?;
    Ok((next, out))
}

/// One estimator per coalition of `players` on top of the `base` features,
/// all sharing the forgetting factor, loss and time index.
#[derive(Clone, Debug)]
pub struct OnlineSession {
    lambda: f64,
    spec: LossSpec,
    policy: InitPolicy,
    base: BTreeSet<String>,
    players: Vec<String>,
    term_names: Vec<String>,
    columns: Vec<Vec<usize>>,
    states: Vec<OnlineState>,
}

/// Per-coalition traces of a streamed run, indexed `[mask][step]`.
#[derive(Clone, Debug, Default)]
pub struct StreamTrace {
    pub losses: Vec<Vec<f64>>,
    pub ewma: Vec<Vec<f64>>,
    /// Out-of-sample residuals `y_t - forecast issued h steps earlier`.
    pub forecast_residuals: Option<Vec<Vec<Option<f64>>>>,
    /// Grand-coalition coefficients after each step.
    pub full_coefficients: Option<Vec<Vec<f64>>>,
    /// First step at which every coalition estimator is ready.
    pub ready_from: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StreamOptions {
    pub horizon: Option<usize>,
    pub record_full_coefficients: bool,
}

const CHUNK: usize = 512;

impl OnlineSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        warmup: &AugmentedDesign,
        y: &[f64],
        base: &BTreeSet<String>,
        players: &[String],
        policy: InitPolicy,
        spec: &LossSpec,
        lambda: f64,
        cap: usize,
    ) -> Result<Self> {
        if players.len() > cap {
            return Err(MarketError::CapExceeded {
                features: players.len(),
                cap,
            });
        }
        let table = CoalitionLossTable::new(players)?;
        let coalitions: Vec<Coalition> = (0..table.n_coalitions()).map(|m| table.coalition_of(m)).collect();
        let columns = coalitions
            .iter()
            .map(|c| warmup.coalition_columns(base, c))
            .collect::<Result<Vec<_>>>()?;
        let states = coalitions
            .par_iter()
            .zip(columns.par_iter())
            .map(|(c, cols)| {
                let x = warmup.values().select_columns(cols);
                init_matrix(&x, y, policy, spec, lambda).map_err(|e| e.in_coalition(c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OnlineSession {
            lambda,
            spec: *spec,
            policy,
            base: base.clone(),
            players: table.players().to_vec(),
            term_names: warmup.term_names(),
            columns,
            states,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn policy(&self) -> InitPolicy {
        self.policy
    }

    pub fn players(&self) -> &[String] {
        &self.players
    }

    pub fn states(&self) -> &[OnlineState] {
        &self.states
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    pub fn is_ready(&self) -> bool {
        self.states.iter().all(OnlineState::is_ready)
    }

    pub fn coalition(&self, mask: usize) -> Coalition {
        self.players
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| p.clone())
            .collect()
    }

    pub fn ewma_table(&self) -> CoalitionLossTable {
        CoalitionLossTable::from_masks(&self.players, |m| self.states[m].ewma_loss.value)
            .expect("players validated at construction")
    }

    fn sub_row(row: &[f64], cols: &[usize]) -> Vec<f64> {
        cols.iter().map(|&c| row[c]).collect()
    }

    /// Advances every coalition one step on its own columns of `full_row`.
    pub fn step(&mut self, full_row: &[f64], y: f64) -> Result<Vec<StepOutcome>> {
        if full_row.len() != self.term_names.len() {
            return Err(MarketError::Parameter(format!(
                "row of {} terms for a design of {}",
                full_row.len(),
                self.term_names.len()
            )));
        }
        let (spec, lambda) = (self.spec, self.lambda);
        let players = &self.players;
        self.states
            .par_iter_mut()
            .zip(self.columns.par_iter())
            .enumerate()
            .map(|(m, (s, cols))| {
                s.step(&Self::sub_row(full_row, cols), y, &spec, lambda)
                    .map_err(|e| e.in_coalition(mask_coalition(players, m)))
            })
            .collect()
    }

    /// Streams rows `start..` of `design`. Work proceeds in chunks; if a step
    /// fails, the error carries a snapshot taken at the start of its chunk.
    pub fn run_stream(
        &mut self,
        design: &AugmentedDesign,
        y: &[f64],
        start: usize,
        opts: StreamOptions,
    ) -> Result<StreamTrace> {
        let x = design.values();
        let t = x.nrows();
        if y.len() != t || start > t || x.ncols() != self.term_names.len() {
            return Err(MarketError::Parameter(format!(
                "stream of {} targets over a {t}x{} design from row {start}",
                y.len(),
                x.ncols()
            )));
        }
        let k = self.states.len();
        let steps = t - start;
        let full = k - 1;
        let mut tracks: Vec<Track> = self
            .states
            .iter()
            .enumerate()
            .map(|(m, s)| Track {
                losses: Vec::with_capacity(steps),
                ewma: Vec::with_capacity(steps),
                forecasts: Vec::new(),
                coefficients: Vec::new(),
                issued: VecDeque::from([s.coefficients.clone()]),
                ready: s.is_ready().then_some(0),
                record: opts.record_full_coefficients && m == full,
            })
            .collect();
        let (spec, lambda) = (self.spec, self.lambda);

        let mut chunk_start = start;
        while chunk_start < t {
            let chunk_end = (chunk_start + CHUNK).min(t);
            let checkpoint = self.states.clone();
            let players = &self.players;
            let failure = self
                .states
                .par_iter_mut()
                .zip(self.columns.par_iter())
                .zip(tracks.par_iter_mut())
                .enumerate()
                .map(|(m, ((state, cols), track))| {
                    for r in chunk_start..chunk_end {
                        let row: Vec<f64> = cols.iter().map(|&c| x[(r, c)]).collect();
                        track
                            .advance(state, &row, y[r], &spec, lambda, opts.horizon, r - start)
                            .map_err(|e| e.in_coalition(mask_coalition(players, m)))?;
                    }
                    Ok(())
                })
                .collect::<Vec<Result<()>>>()
                .into_iter()
                .find_map(|r| r.err());
            if let Some(err) = failure {
                self.states = checkpoint;
                return Err(MarketError::StepFailed {
                    step: chunk_start,
                    checkpoint: Box::new(serde_json::to_string(&self.snapshot())?),
                    source: Box::new(err),
                });
            }
            chunk_start = chunk_end;
        }

        let ready_from = tracks
            .iter()
            .map(|tr| tr.ready)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().max().unwrap_or(0));
        let mut trace = StreamTrace {
            ready_from,
            ..StreamTrace::default()
        };
        if opts.record_full_coefficients {
            trace.full_coefficients = Some(std::mem::take(&mut tracks[full].coefficients));
        }
        if opts.horizon.is_some() {
            trace.forecast_residuals = Some(tracks.iter_mut().map(|tr| std::mem::take(&mut tr.forecasts)).collect());
        }
        for tr in tracks {
            trace.losses.push(tr.losses);
            trace.ewma.push(tr.ewma);
        }
        Ok(trace)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            version: SNAPSHOT_VERSION,
            lambda: self.lambda,
            spec: self.spec,
            policy: self.policy,
            base: self.base.iter().cloned().collect(),
            players: self.players.clone(),
            term_names: self.term_names.clone(),
            states: self
                .states
                .iter()
                .zip(&self.columns)
                .enumerate()
                .map(|(m, (s, cols))| StateSnapshot {
                    coalition: self.coalition(m),
                    columns: cols.clone(),
                    terms: cols.iter().map(|&c| self.term_names[c].clone()).collect(),
                    coefficients: s.coefficients.as_slice().to_vec(),
                    memory: s.memory.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    pending: s.pending.as_ref().map(|g| g.as_slice().to_vec()),
                    min_steps: s.min_steps,
                    ewma_loss: s.ewma_loss,
                    step_count: s.step_count,
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &SessionSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(MarketError::Config(format!(
                "snapshot version {} is not supported (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        let expected = 1usize << snap.players.len();
        if snap.states.len() != expected {
            return Err(MarketError::Config(format!(
                "snapshot holds {} states for {} players",
                snap.states.len(),
                snap.players.len()
            )));
        }
        let mut columns = Vec::with_capacity(expected);
        let mut states = Vec::with_capacity(expected);
        for s in &snap.states {
            let n = s.coefficients.len();
            if s.columns.len() != n || s.memory.len() != n || s.memory.iter().any(|r| r.len() != n) {
                return Err(MarketError::Config(format!(
                    "inconsistent state for coalition {}",
                    s.coalition
                )));
            }
            columns.push(s.columns.clone());
            states.push(OnlineState {
                coefficients: DVector::from_vec(s.coefficients.clone()),
                memory: DMatrix::from_fn(n, n, |i, j| s.memory[i][j]),
                pending: s.pending.clone().map(DVector::from_vec),
                min_steps: s.min_steps,
                ewma_loss: s.ewma_loss,
                step_count: s.step_count,
            });
        }
        Ok(OnlineSession {
            lambda: snap.lambda,
            spec: snap.spec,
            policy: snap.policy,
            base: snap.base.iter().cloned().collect(),
            players: snap.players.clone(),
            term_names: snap.term_names.clone(),
            columns,
            states,
        })
    }
}

struct Track {
    losses: Vec<f64>,
    ewma: Vec<f64>,
    forecasts: Vec<Option<f64>>,
    coefficients: Vec<Vec<f64>>,
    /// Coefficients issued at the last `h` steps, oldest first.
    issued: VecDeque<DVector<f64>>,
    ready: Option<usize>,
    record: bool,
}

impl Track {
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        state: &mut OnlineState,
        row: &[f64],
        y: f64,
        spec: &LossSpec,
        lambda: f64,
        horizon: Option<usize>,
        index: usize,
    ) -> Result<()> {
        let early = match horizon {
            Some(h) if h >= 1 && self.issued.len() == h => {
                Some(y - self.issued[0].iter().zip(row).map(|(b, x)| b * x).sum::<f64>())
            }
            _ => None,
        };
        let out = state.step(row, y, spec, lambda)?;
        self.losses.push(out.loss);
        self.ewma.push(state.ewma_loss.value);
        if let Some(h) = horizon {
            self.issued.push_back(state.coefficients.clone());
            while self.issued.len() > h.max(1) {
                self.issued.pop_front();
            }
            self.forecasts
                .push(if h == 0 { Some(y - state.forecast(row)) } else { early });
        }
        if self.record {
            self.coefficients.push(state.coefficients.as_slice().to_vec());
        }
        if self.ready.is_none() && state.is_ready() {
            self.ready = Some(index + 1);
        }
        Ok(())
    }
}

fn mask_coalition(players: &[String], mask: usize) -> Coalition {
    players
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, p)| p.clone())
        .collect()
}

pub fn session_step(session: &mut OnlineSession, full_row: &[f64], y: f64) -> Result<Vec<StepOutcome>> {
    session.step(full_row, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub version: u32,
    pub lambda: f64,
    pub spec: LossSpec,
    pub policy: InitPolicy,
    pub base: Vec<String>,
    pub players: Vec<String>,
    pub term_names: Vec<String>,
    pub states: Vec<StateSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub coalition: Coalition,
    pub columns: Vec<usize>,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub memory: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Vec<f64>>,
    pub min_steps: u64,
    pub ewma_loss: EwmaLoss,
    pub step_count: u64,
}
