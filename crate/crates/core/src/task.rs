//! Regression task definitions and their preparation into a design matrix
//! split between central and support features.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationPolicy;
use crate::data::{lag_column_name, make_lags, AgentId, Dataset, LagSpec};
use crate::design::{polynomial_expand, AugmentedDesign};
use crate::error::{MarketError, Result};
use crate::loss::LossSpec;
use crate::online::InitPolicy;

/// Which features play the coalition game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapleyGame {
    /// Central features are always present; support features are players.
    #[default]
    SupportOnly,
    /// Central and support features are all players over an intercept-only
    /// baseline. Central shares are not paid out.
    CentralInclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Raw series used as inputs; all dataset features when absent.
    pub inputs: Option<Vec<String>>,
    /// Lags of the target series added as central features.
    pub target_lags: Vec<usize>,
    /// When non-empty, inputs enter only through these lags.
    pub feature_lags: Vec<usize>,
    pub degree: u32,
    pub interactions: bool,
    /// Terms to keep (by name); every term when empty.
    pub terms: Vec<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::linear()
    }
}

impl ModelSpec {
    pub fn linear() -> Self {
        ModelSpec {
            inputs: None,
            target_lags: Vec::new(),
            feature_lags: Vec::new(),
            degree: 1,
            interactions: false,
            terms: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    #[default]
    Batch,
    Online,
}

/// How per-step out-of-sample losses are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OosScaling {
    /// Every evaluated step is paid in full.
    #[default]
    Volumetric,
    /// Losses are divided by the number of evaluated steps.
    PerPeriod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OosSpec {
    pub source: ModelSource,
    /// Rows used to train batch models; evaluation starts right after.
    pub train_rows: Option<usize>,
    pub scaling: OosScaling,
    /// Rows per consistency window.
    pub window: usize,
}

impl Default for OosSpec {
    fn default() -> Self {
        OosSpec {
            source: ModelSource::Batch,
            train_rows: None,
            scaling: OosScaling::Volumetric,
            window: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreeningMethod {
    CvLoss,
    BurnInShapley,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSpec {
    pub method: ScreeningMethod,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_burn_in() -> usize {
    500
}

fn default_folds() -> usize {
    5
}

impl ScreeningSpec {
    pub fn new(method: ScreeningMethod) -> Self {
        ScreeningSpec {
            method,
            burn_in: default_burn_in(),
            folds: default_folds(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub central_agent: AgentId,
    /// Target series; the dataset's target when absent.
    pub target: Option<String>,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub phi_insample: f64,
    pub phi_oos: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub policy: AllocationPolicy,
    pub oos_policy: AllocationPolicy,
    pub game: ShapleyGame,
    pub init: InitPolicy,
    /// Rows used to initialize online estimators.
    pub warmup: usize,
    pub coalition_cap: usize,
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Express losses in percent points (normalizer scaled by 100).
    pub percent_points: bool,
    pub screening: Option<ScreeningSpec>,
    /// Leading rows already paid for in an earlier batch window.
    pub billed_rows: usize,
    pub oos: OosSpec,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            central_agent: AgentId::new("a1"),
            target: None,
            model: ModelSpec::linear(),
            loss: LossSpec::quadratic(),
            phi_insample: 0.1,
            phi_oos: 0.1,
            lambda: 0.998,
            horizon: 1,
            policy: AllocationPolicy::Shapley,
            oos_policy: AllocationPolicy::ZeroShapley,
            game: ShapleyGame::SupportOnly,
            init: InitPolicy::default(),
            warmup: 100,
            coalition_cap: 15,
            mc_samples: 2000,
            mc_seed: 0,
            percent_points: false,
            screening: None,
            billed_rows: 0,
            oos: OosSpec::default(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        for (name, phi) in [("phi_insample", self.phi_insample), ("phi_oos", self.phi_oos)] {
            if !(phi.is_finite() && phi >= 0.0) {
                return Err(MarketError::Parameter(format!(
                    "{name} = {phi} must be finite and >= 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MarketError::Parameter(format!(
                "forgetting factor {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.model.degree < 1 {
            return Err(MarketError::Parameter("polynomial degree must be at least 1".into()));
        }
        if self.oos.window == 0 {
            return Err(MarketError::Parameter(
                "consistency window must be at least 1 row".into(),
            ));
        }
        Ok(())
    }

    pub fn unit_scale(&self) -> f64 {
        if self.percent_points {
            100.0
        } else {
            1.0
        }
    }
}

/// A task's design with its central and support features resolved.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub dataset: Dataset,
    pub design: AugmentedDesign,
    pub y: Vec<f64>,
    pub central: BTreeSet<String>,
    /// Sorted support features appearing in the design.
    pub support: Vec<String>,
    pub ownership: BTreeMap<String, AgentId>,
}

pub fn prepare(dataset: &Dataset, task: &TaskSpec) -> Result<PreparedTask> {
    task.validate()?;
    let ds = match &task.target {
        Some(t) if t != &dataset.target().name => dataset.with_target(t)?,
        _ => dataset.clone(),
    };
    let target = ds.target().name.clone();
    if ds.target().owner != task.central_agent {
        return Err(MarketError::Parameter(format!(
            "target `{target}` is owned by {} but the central agent is {}",
            ds.target().owner,
            task.central_agent
        )));
    }
    let inputs: Vec<String> = match &task.model.inputs {
        Some(v) => {
            for name in v {
                ds.feature(name)?;
            }
            v.clone()
        }
        None => ds
            .features()
            .iter()
            .filter(|s| s.origin.is_none())
            .map(|s| s.name.clone())
            .collect(),
    };

    let mut lags = LagSpec::new();
    if !task.model.target_lags.is_empty() {
        lags.insert(target.clone(), task.model.target_lags.clone());
    }
    if !task.model.feature_lags.is_empty() {
        for f in &inputs {
            lags.insert(f.clone(), task.model.feature_lags.clone());
        }
    }
    let lagged = make_lags(&ds, &lags)?;

    let mut columns: Vec<String> = Vec::new();
    for &d in sorted(&task.model.target_lags).iter() {
        columns.push(lag_column_name(&target, d));
    }
    if task.model.feature_lags.is_empty() {
        columns.extend(inputs.iter().cloned());
    } else {
        for f in &inputs {
            for &d in sorted(&task.model.feature_lags).iter() {
                columns.push(lag_column_name(f, d));
            }
        }
    }
    let model_ds = lagged.select_features(&columns)?;
    let mut design = polynomial_expand(&model_ds, task.model.degree, task.model.interactions)?;
    if !task.model.terms.is_empty() {
        design = design.retain_terms(&task.model.terms)?;
    }

    let ownership: BTreeMap<String, AgentId> = model_ds
        .features()
        .iter()
        .map(|s| (s.name.clone(), s.owner.clone()))
        .collect();
    let used = design.features();
    let central: BTreeSet<String> = used
        .iter()
        .filter(|f| ownership[*f] == task.central_agent)
        .cloned()
        .collect();
    let support: Vec<String> = used.iter().filter(|f| !central.contains(*f)).cloned().collect();
    let y = model_ds.target().values.clone();
    Ok(PreparedTask {
        dataset: model_ds,
        design,
        y,
        central,
        support,
        ownership,
    })
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl PreparedTask {
    /// Base features and coalition players for `game`.
    pub fn players(&self, game: ShapleyGame) -> (BTreeSet<String>, Vec<String>) {
        match game {
            ShapleyGame::SupportOnly => (self.central.clone(), self.support.clone()),
            ShapleyGame::CentralInclusive => {
                let mut all: Vec<String> = self.central.iter().chain(&self.support).cloned().collect();
                all.sort();
                (BTreeSet::new(), all)
            }
        }
    }

    /// Drops support features outside `keep`, with every term touching them.
    pub fn restrict_support(&self, keep: &[String]) -> Result<PreparedTask> {
        let dropped: BTreeSet<&String> = self.support.iter().filter(|f| !keep.contains(f)).collect();
        let cols: Vec<usize> = self
            .design
            .terms()
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.support.iter().any(|f| dropped.contains(f)))
            .map(|(i, _)| i)
            .collect();
        let design = self.design.select_columns(&cols);
        let used = design.features();
        Ok(PreparedTask {
            dataset: self.dataset.clone(),
            central: self.central.iter().filter(|f| used.contains(*f)).cloned().collect(),
            support: self.support.iter().filter(|f| used.contains(*f)).cloned().collect(),
            design,
            y: self.y.clone(),
            ownership: self.ownership.clone(),
        })
    }

    /// True when no term mixes features of different owners.
    pub fn separable(&self) -> bool {
        self.design.terms().iter().all(|t| t.owners.len() <= 1)
    }

    /// Pairs of support features with bitwise identical columns.
    pub fn duplicates(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, a) in self.support.iter().enumerate() {
            for b in &self.support[i + 1..] {
                let (Ok(sa), Ok(sb)) = (self.dataset.feature(a), self.dataset.feature(b)) else {
                    continue;
                };
                if sa.values == sb.values {
                    out.push((a.clone(), b.clone()));
                }
            }
        }
        out
    }

    /// Support features whose column is constant, hence redundant with the
    /// intercept.
    pub fn dummies(&self) -> Vec<String> {
        self.support
            .iter()
            .filter(|f| {
                self.dataset
                    .feature(f)
                    .map(|s| s.values.iter().all(|v| *v == s.values[0]))
                    .unwrap_or(false)
            })
            .cloned()
            .collect()
    }

    pub fn owner(&self, feature: &str) -> Result<&AgentId> {
        self.ownership
            .get(feature)
            .ok_or_else(|| MarketError::Lookup(feature.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Series;

    fn dataset() -> Dataset {
        let t = 30;
        let s = |k: f64| (0..t).map(|i| ((i as f64 + 1.0) * k).sin()).collect::<Vec<_>>();
        Dataset::indexed(
            Series::new("y", "a1", s(0.3)),
            vec![
                Series::new("x1", "a1", s(0.7)),
                Series::new("x2", "a2", s(1.1)),
                Series::new("x3", "a3", s(1.9)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn linear_split() {
        let p = prepare(&dataset(), &TaskSpec::default()).unwrap();
        assert_eq!(p.central, BTreeSet::from(["x1".to_string()]));
        assert_eq!(p.support, vec!["x2", "x3"]);
        assert!(p.separable());
        assert_eq!(p.design.term_names(), vec!["1", "x1", "x2", "x3"]);
    }

    #[test]
    fn arx_lag_columns() {
        let task = TaskSpec {
            model: ModelSpec {
                inputs: Some(vec!["x2".into(), "x3".into()]),
                target_lags: vec![1],
                feature_lags: vec![1],
                degree: 1,
                ..ModelSpec::default()
            },
            ..TaskSpec::default()
        };
        let p = prepare(&dataset(), &task).unwrap();
        assert_eq!(p.design.term_names(), vec!["1", "y_lag1", "x2_lag1", "x3_lag1"]);
        assert_eq!(p.y.len(), 29);
        assert_eq!(p.support, vec!["x2_lag1", "x3_lag1"]);
    }

    #[test]
    fn interaction_model_is_not_separable() {
        let task = TaskSpec {
            model: ModelSpec {
                degree: 2,
                interactions: true,
                terms: vec!["x1".into(), "x2".into(), "x1*x3".into(), "x3".into()],
                ..ModelSpec::default()
            },
            ..TaskSpec::default()
        };
        let p = prepare(&dataset(), &task).unwrap();
        assert!(!p.separable());
        let (base, players) = p.players(ShapleyGame::CentralInclusive);
        assert!(base.is_empty());
        assert_eq!(players, vec!["x1", "x2", "x3"]);
        let r = p.restrict_support(&["x2".to_string()]).unwrap();
        assert_eq!(r.design.term_names(), vec!["1", "x1", "x2"]);
    }

    #[test]
    fn foreign_target_rejected() {
        let task = TaskSpec {
            target: Some("x2".into()),
            ..TaskSpec::default()
        };
        assert!(matches!(prepare(&dataset(), &task), Err(MarketError::Parameter(_))));
    }
}
