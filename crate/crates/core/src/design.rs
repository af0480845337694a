//! Augmented design matrices and coalition sub-designs.
//!
//! Every model term records the raw feature columns it is built from (its
//! support) and the agents owning them. A coalition's design keeps exactly
//! the terms whose support lies inside the central agent's features plus the
//! coalition, so interaction terms join a coalition as a bundle once all of
//! their factors are present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{AgentId, Dataset};
use crate::error::{MarketError, Result};

/// A set of support-agent features.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(BTreeSet<String>);

impl Coalition {
    pub fn empty() -> Self {
        Coalition(BTreeSet::new())
    }

    pub fn members(&self) -> &BTreeSet<String> {
        &self.0
    }

    pub fn contains(&self, feature: &str) -> bool {
        self.0.contains(feature)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with(&self, feature: &str) -> Coalition {
        let mut c = self.clone();
        c.0.insert(feature.to_string());
        c
    }
}

impl<S: Into<String>> FromIterator<S> for Coalition {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Coalition(iter.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("{}");
        }
        let names: Vec<&str> = self.0.iter().map(String::as_str).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Raw {
        feature: String,
    },
    /// A lagged column; `feature` is the column name, `source` the series it lags.
    Lag {
        feature: String,
        source: String,
        lag: usize,
    },
    Monomial {
        factors: Vec<(String, u32)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDescriptor {
    pub kind: TermKind,
    pub support: BTreeSet<String>,
    pub owners: BTreeSet<AgentId>,
}

impl TermDescriptor {
    pub fn intercept() -> Self {
        TermDescriptor {
            kind: TermKind::Intercept,
            support: BTreeSet::new(),
            owners: BTreeSet::new(),
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            TermKind::Intercept => "1".to_string(),
            TermKind::Raw { feature } | TermKind::Lag { feature, .. } => feature.clone(),
            TermKind::Monomial { factors } => factors
                .iter()
                .map(|(f, p)| if *p == 1 { f.clone() } else { format!("{f}^{p}") })
                .collect::<Vec<_>>()
                .join("*"),
        }
    }

    pub fn degree(&self) -> u32 {
        match &self.kind {
            TermKind::Intercept => 0,
            TermKind::Raw { .. } | TermKind::Lag { .. } => 1,
            TermKind::Monomial { factors } => factors.iter().map(|(_, p)| p).sum(),
        }
    }

    /// Evaluates the term from raw feature values.
    pub fn evaluate(&self, value_of: impl Fn(&str) -> f64) -> f64 {
        match &self.kind {
            TermKind::Intercept => 1.0,
            TermKind::Raw { feature } | TermKind::Lag { feature, .. } => value_of(feature),
            TermKind::Monomial { factors } => factors.iter().map(|(f, p)| value_of(f).powi(*p as i32)).product(),
        }
    }
}

/// Time-indexed matrix of model-term evaluations (`T x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDesign {
    terms: Vec<TermDescriptor>,
    values: DMatrix<f64>,
}

impl AugmentedDesign {
    pub fn new(terms: Vec<TermDescriptor>, values: DMatrix<f64>) -> Result<Self> {
        if terms.is_empty() || terms[0].kind != TermKind::Intercept {
            return Err(MarketError::Parameter("the first term must be the intercept".into()));
        }
        if values.ncols() != terms.len() {
            return Err(MarketError::Parameter(format!(
                "{} terms but {} columns",
                terms.len(),
                values.ncols()
            )));
        }
        Ok(AugmentedDesign { terms, values })
    }

    pub fn terms(&self) -> &[TermDescriptor] {
        &self.terms
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(TermDescriptor::name).collect()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// Union of all term supports.
    pub fn features(&self) -> BTreeSet<String> {
        self.terms.iter().flat_map(|t| t.support.iter().cloned()).collect()
    }

    /// Owner of every feature appearing in some term.
    pub fn ownership(&self) -> BTreeMap<String, AgentId> {
        let mut out = BTreeMap::new();
        for t in &self.terms {
            if let TermKind::Raw { feature } | TermKind::Lag { feature, .. } = &t.kind {
                if let Some(o) = t.owners.iter().next() {
                    out.insert(feature.clone(), o.clone());
                }
            }
        }
        out
    }

    pub fn select_columns(&self, cols: &[usize]) -> AugmentedDesign {
        AugmentedDesign {
            terms: cols.iter().map(|&c| self.terms[c].clone()).collect(),
            values: self.values.select_columns(cols),
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> AugmentedDesign {
        AugmentedDesign {
            terms: self.terms.clone(),
            values: self.values.rows(start, len).into_owned(),
        }
    }

    /// Keeps the intercept and the named terms, in design order.
    pub fn retain_terms<S: AsRef<str>>(&self, names: &[S]) -> Result<AugmentedDesign> {
        let all = self.term_names();
        for n in names {
            if !all.iter().any(|a| a == n.as_ref()) {
                return Err(MarketError::Lookup(n.as_ref().to_string()));
            }
        }
        let cols: Vec<usize> = all
            .iter()
            .enumerate()
            .filter(|(i, a)| *i == 0 || names.iter().any(|n| n.as_ref() == a.as_str()))
            .map(|(i, _)| i)
            .collect();
        Ok(self.select_columns(&cols))
    }

    /// Columns whose support lies inside `central ∪ coalition`.
    pub fn coalition_columns(&self, central: &BTreeSet<String>, coalition: &Coalition) -> Result<Vec<usize>> {
        let known = self.features();
        for f in central.iter().chain(coalition.members()) {
            if !known.contains(f) {
                return Err(MarketError::Lookup(f.clone()));
            }
        }
        Ok(self
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.support.iter().all(|f| central.contains(f) || coalition.contains(f)))
            .map(|(i, _)| i)
            .collect())
    }
}

fn single_term(dataset: &Dataset, idx: usize) -> TermDescriptor {
    let s = &dataset.features()[idx];
    let kind = match &s.origin {
        Some(o) => TermKind::Lag {
            feature: s.name.clone(),
            source: o.source.clone(),
            lag: o.lag,
        },
        None => TermKind::Raw {
            feature: s.name.clone(),
        },
    };
    TermDescriptor {
        kind,
        support: BTreeSet::from([s.name.clone()]),
        owners: BTreeSet::from([s.owner.clone()]),
    }
}

/// Intercept plus every monomial of total degree `<= degree` in the dataset's
/// features, graded by degree and lexicographic within a degree. Cross terms
/// appear only with `interactions`.
pub fn polynomial_expand(dataset: &Dataset, degree: u32, interactions: bool) -> Result<AugmentedDesign> {
    if degree < 1 {
        return Err(MarketError::Parameter("polynomial degree must be at least 1".into()));
    }
    let k = dataset.features().len();
    let mut terms = vec![TermDescriptor::intercept()];
    let mut combos: Vec<Vec<usize>> = Vec::new();
    for d in 1..=degree as usize {
        let mut idx = vec![0usize; d];
        if k == 0 {
            break;
        }
        loop {
            if interactions || idx.iter().all(|&i| i == idx[0]) {
                combos.push(idx.clone());
            }
            // next non-decreasing sequence
            let mut p = d;
            while p > 0 && idx[p - 1] == k - 1 {
                p -= 1;
            }
            if p == 0 {
                break;
            }
            idx[p - 1] += 1;
            let v = idx[p - 1];
            for slot in idx.iter_mut().skip(p) {
                *slot = v;
            }
        }
    }
    for combo in &combos {
        if combo.len() == 1 {
            terms.push(single_term(dataset, combo[0]));
            continue;
        }
        let mut factors: Vec<(String, u32)> = Vec::new();
        for &i in combo {
            let name = &dataset.features()[i].name;
            match factors.last_mut() {
                Some((f, p)) if f == name => *p += 1,
                _ => factors.push((name.clone(), 1)),
            }
        }
        terms.push(TermDescriptor {
            support: combo.iter().map(|&i| dataset.features()[i].name.clone()).collect(),
            owners: combo.iter().map(|&i| dataset.features()[i].owner.clone()).collect(),
            kind: TermKind::Monomial { factors },
        });
    }
    let t = dataset.len();
    let mut values = DMatrix::zeros(t, terms.len());
    let cols: BTreeMap<&str, &[f64]> = dataset
        .features()
        .iter()
        .map(|s| (s.name.as_str(), s.values.as_slice()))
        .collect();
    for (j, term) in terms.iter().enumerate() {
        for r in 0..t {
            values[(r, j)] = term.evaluate(|f| cols[f][r]);
        }
    }
    AugmentedDesign::new(terms, values)
}

/// Plain linear design: intercept plus one column per feature.
pub fn linear_design(dataset: &Dataset) -> Result<AugmentedDesign> {
    polynomial_expand(dataset, 1, false)
}

/// Sub-design with the terms whose support lies inside `central ∪ coalition`.
pub fn coalition_design(
    design: &AugmentedDesign,
    central: &BTreeSet<String>,
    coalition: &Coalition,
) -> Result<AugmentedDesign> {
    let cols = design.coalition_columns(central, coalition)?;
    Ok(design.select_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Series;

    fn dataset(k: usize) -> Dataset {
        let feats = (1..=k)
            .map(|i| {
                Series::new(
                    format!("x{i}"),
                    format!("a{i}").as_str(),
                    vec![i as f64, 2.0 * i as f64, 0.5],
                )
            })
            .collect();
        Dataset::indexed(Series::new("y", "a1", vec![0.0; 3]), feats).unwrap()
    }

    #[test]
    fn order_two_with_two_features() {
        let d = polynomial_expand(&dataset(2), 2, true).unwrap();
        assert_eq!(d.term_names(), vec!["1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]);
        assert_eq!(d.n_terms(), 6);
        let row: Vec<f64> = d.values().row(1).iter().copied().collect();
        assert_eq!(row, vec![1.0, 2.0, 4.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn degree_one_is_linear() {
        let d = polynomial_expand(&dataset(4), 1, true).unwrap();
        assert_eq!(d.n_terms(), 5);
        assert!(polynomial_expand(&dataset(2), 0, true).is_err());
    }

    #[test]
    fn three_features_order_two() {
        let d = polynomial_expand(&dataset(3), 2, true).unwrap();
        assert_eq!(d.n_terms(), 10);
        let names: BTreeSet<String> = d.term_names().into_iter().collect();
        for t in ["1", "x1", "x2", "x3", "x1^2", "x2^2", "x3^2", "x1*x2", "x1*x3", "x2*x3"] {
            assert!(names.contains(t), "{t}");
        }
        let no_cross = polynomial_expand(&dataset(3), 2, false).unwrap();
        assert_eq!(no_cross.n_terms(), 7);
    }

    #[test]
    fn coalition_bundles_interactions() {
        let d = polynomial_expand(&dataset(3), 2, true).unwrap();
        let central = BTreeSet::from(["x1".to_string()]);
        let sub = coalition_design(&d, &central, &Coalition::from_iter(["x3"])).unwrap();
        let names: BTreeSet<String> = sub.term_names().into_iter().collect();
        let expected: BTreeSet<String> = ["1", "x1", "x3", "x1^2", "x1*x3", "x3^2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(names, expected);

        let empty = coalition_design(&d, &central, &Coalition::empty()).unwrap();
        assert_eq!(empty.term_names(), vec!["1", "x1", "x1^2"]);

        let full = coalition_design(&d, &central, &Coalition::from_iter(["x2", "x3"])).unwrap();
        assert_eq!(full.term_names(), d.term_names());

        assert!(matches!(
            coalition_design(&d, &central, &Coalition::from_iter(["x9"])).unwrap_err(),
            MarketError::Lookup(_)
        ));
    }

    #[test]
    fn retain_terms_keeps_intercept() {
        let d = polynomial_expand(&dataset(3), 2, true).unwrap();
        let r = d.retain_terms(&["x1", "x2^2", "x1*x3"]).unwrap();
        assert_eq!(r.term_names(), vec!["1", "x1", "x1*x3", "x2^2"]);
        assert!(d.retain_terms(&["x7"]).is_err());
    }
}
