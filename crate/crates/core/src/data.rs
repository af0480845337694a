//! Time-indexed datasets: construction, CSV ingestion/export and lagging.
//!
//! A [`Dataset`] holds one target series and any number of feature series,
//! every series tagged with the agent that owns it. Timestamps are carried as
//! metadata; every algorithm downstream works on row order only.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};

/// Identifier of a market participant.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

/// A point of the time index. `key` orders rows, `label` is what was read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamp {
    pub key: i64,
    pub label: String,
}

impl Timestamp {
    pub fn index(i: i64) -> Self {
        Timestamp {
            key: i,
            label: i.to_string(),
        }
    }

    /// Parses an integer index or an ISO-8601 date/time.
    pub fn parse(raw: &str) -> std::result::Result<Self, String> {
        let s = raw.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Timestamp::index(i));
        }
        let key = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            dt.timestamp()
        } else if let Some(dt) = [
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%d %H:%M:%S",
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M",
        ]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        {
            dt.and_utc().timestamp()
        } else if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            d.and_hms_opt(0, 0, 0).expect("midnight is valid").and_utc().timestamp()
        } else {
            return Err(format!("cannot parse timestamp `{s}`"));
        };
        Ok(Timestamp {
            key,
            label: s.to_string(),
        })
    }
}

/// Where a lagged column came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagOrigin {
    pub source: String,
    pub lag: usize,
}

/// One named, owned, real-valued series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub owner: AgentId,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<LagOrigin>,
}

impl Series {
    pub fn new(name: impl Into<String>, owner: impl Into<AgentId>, values: Vec<f64>) -> Self {
        Series {
            name: name.into(),
            owner: owner.into(),
            values,
            origin: None,
        }
    }
}

impl From<String> for AgentId {
    fn from(s: String) -> Self {
        AgentId(s)
    }
}

impl From<&AgentId> for AgentId {
    fn from(a: &AgentId) -> Self {
        a.clone()
    }
}

/// Target plus features over a common, strictly increasing time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    timestamps: Vec<Timestamp>,
    target: Series,
    features: Vec<Series>,
}

impl Dataset {
    pub fn new(timestamps: Vec<Timestamp>, target: Series, features: Vec<Series>) -> Result<Self> {
        let t = timestamps.len();
        if t == 0 {
            return Err(MarketError::InsufficientData("a dataset needs at least one row".into()));
        }
        if let Some(row) = timestamps.windows(2).position(|w| w[1].key <= w[0].key) {
            return Err(MarketError::Ordering { row: row + 1 });
        }
        let mut names = HashSet::new();
        for s in std::iter::once(&target).chain(features.iter()) {
            if s.values.len() != t {
                return Err(MarketError::Parameter(format!(
                    "series `{}` has {} values, expected {t}",
                    s.name,
                    s.values.len()
                )));
            }
            if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(MarketError::Numeric(format!("series `{}` row {i}", s.name)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(MarketError::Schema(format!("duplicate series name `{}`", s.name)));
            }
        }
        Ok(Dataset {
            timestamps,
            target,
            features,
        })
    }

    /// Dataset indexed `0..T`.
    pub fn indexed(target: Series, features: Vec<Series>) -> Result<Self> {
        let t = target.values.len() as i64;
        Dataset::new((0..t).map(Timestamp::index).collect(), target, features)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn target(&self) -> &Series {
        &self.target
    }

    pub fn features(&self) -> &[Series] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn feature(&self, name: &str) -> Result<&Series> {
        self.features
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| MarketError::Lookup(name.to_string()))
    }

    /// Owner of a feature or of the target.
    pub fn owner_of(&self, name: &str) -> Result<&AgentId> {
        if self.target.name == name {
            return Ok(&self.target.owner);
        }
        self.feature(name).map(|s| &s.owner)
    }

    /// Every agent that owns at least one series, sorted.
    pub fn agents(&self) -> Vec<AgentId> {
        let mut agents: Vec<AgentId> = std::iter::once(&self.target)
            .chain(self.features.iter())
            .map(|s| s.owner.clone())
            .collect();
        agents.sort();
        agents.dedup();
        agents
    }

    pub fn slice(&self, rows: Range<usize>) -> Result<Dataset> {
        if rows.start >= rows.end || rows.end > self.len() {
            return Err(MarketError::Parameter(format!(
                "row range {rows:?} invalid for {} rows",
                self.len()
            )));
        }
        let cut = |s: &Series| Series {
            values: s.values[rows.clone()].to_vec(),
            ..s.clone()
        };
        Ok(Dataset {
            timestamps: self.timestamps[rows.clone()].to_vec(),
            target: cut(&self.target),
            features: self.features.iter().map(cut).collect(),
        })
    }

    /// Keeps only the named features, in the given order.
    pub fn select_features<S: AsRef<str>>(&self, names: &[S]) -> Result<Dataset> {
        let features = names
            .iter()
            .map(|n| self.feature(n.as_ref()).cloned())
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.timestamps.clone(), self.target.clone(), features)
    }

    /// Swaps a feature column in as the target; the previous target becomes
    /// a feature in its place at the front of the feature list.
    pub fn with_target(&self, name: &str) -> Result<Dataset> {
        if self.target.name == name {
            return Ok(self.clone());
        }
        let idx = self
            .features
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| MarketError::Lookup(name.to_string()))?;
        let mut features = self.features.clone();
        let new_target = features.remove(idx);
        features.insert(0, self.target.clone());
        Ok(Dataset {
            timestamps: self.timestamps.clone(),
            target: new_target,
            features,
        })
    }

    pub fn push_feature(&self, series: Series) -> Result<Dataset> {
        let mut features = self.features.clone();
        features.push(series);
        Dataset::new(self.timestamps.clone(), self.target.clone(), features)
    }

    /// Replaces the values of one feature.
    pub fn replace_feature(&self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        let mut features = self.features.clone();
        let s = features
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| MarketError::Lookup(name.to_string()))?;
        s.values = values;
        Dataset::new(self.timestamps.clone(), self.target.clone(), features)
    }

    /// Reassigns ownership of a feature.
    pub fn reassign(&self, name: &str, owner: AgentId) -> Result<Dataset> {
        let mut out = self.clone();
        let s = out
            .features
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| MarketError::Lookup(name.to_string()))?;
        s.owner = owner;
        Ok(out)
    }
}

/// Column roles for [`ingest_csv`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub target: String,
    pub target_owner: Option<AgentId>,
    /// Feature columns to read; empty means every non-timestamp, non-target column.
    pub features: Vec<String>,
    pub ownership: BTreeMap<String, AgentId>,
    /// Nominal capacity per column; used only when `normalize` is set.
    pub capacities: BTreeMap<String, f64>,
    pub normalize: bool,
}

impl CsvSchema {
    pub fn new(timestamp: &str, target: &str) -> Self {
        CsvSchema {
            timestamp: timestamp.to_string(),
            target: target.to_string(),
            ..Default::default()
        }
    }

    pub fn owned(mut self, feature: &str, owner: &str) -> Self {
        self.ownership.insert(feature.to_string(), AgentId::new(owner));
        self
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MarketError::Schema(format!("missing column `{name}`")))
    };
    let ts_col = col(&schema.timestamp)?;
    let target_col = col(&schema.target)?;
    let feature_names: Vec<String> = if schema.features.is_empty() {
        header
            .iter()
            .filter(|h| **h != schema.timestamp && **h != schema.target)
            .cloned()
            .collect()
    } else {
        schema.features.clone()
    };
    let feature_cols = feature_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let owners = feature_names
        .iter()
        .map(|n| {
            schema
                .ownership
                .get(n)
                .cloned()
                .ok_or_else(|| MarketError::Schema(format!("feature `{n}` has no owner")))
        })
        .collect::<Result<Vec<_>>>()?;
    let target_owner = schema
        .target_owner
        .clone()
        .or_else(|| schema.ownership.get(&schema.target).cloned())
        .ok_or_else(|| MarketError::Schema(format!("target `{}` has no owner", schema.target)))?;

    let scale = |name: &str| -> f64 {
        if schema.normalize {
            schema.capacities.get(name).copied().unwrap_or(1.0)
        } else {
            1.0
        }
    };
    let target_scale = scale(&schema.target);
    let feature_scales: Vec<f64> = feature_names.iter().map(|n| scale(n)).collect();
    for (name, cap) in &schema.capacities {
        if schema.normalize && !(cap.is_finite() && *cap > 0.0) {
            return Err(MarketError::Schema(format!("capacity of `{name}` must be positive")));
        }
    }

    let mut timestamps = Vec::new();
    let mut target = Vec::new();
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); feature_cols.len()];
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            if raw.is_empty() {
                return Err(MarketError::Row {
                    line,
                    msg: format!("missing value in column `{name}`"),
                });
            }
            let v: f64 = raw.parse().map_err(|_| MarketError::Row {
                line,
                msg: format!("non-numeric value `{raw}` in column `{name}`"),
            })?;
            if !v.is_finite() {
                return Err(MarketError::Row {
                    line,
                    msg: format!("non-finite value in column `{name}`"),
                });
            }
            Ok(v)
        };
        let ts = Timestamp::parse(record.get(ts_col).unwrap_or("")).map_err(|msg| MarketError::Row { line, msg })?;
        if let Some(prev) = timestamps.last() {
            let prev: &Timestamp = prev;
            if ts.key <= prev.key {
                return Err(MarketError::Ordering { row: timestamps.len() });
            }
        }
        let y = cell(target_col, &schema.target)? / target_scale;
        if schema.normalize && !(0.0..=1.0).contains(&y) {
            return Err(MarketError::Row {
                line,
                msg: format!("normalized target {y} outside [0, 1]"),
            });
        }
        target.push(y);
        for (j, (&c, name)) in feature_cols.iter().zip(&feature_names).enumerate() {
            features[j].push(cell(c, name)? / feature_scales[j]);
        }
        timestamps.push(ts);
    }
    let target = Series::new(schema.target.clone(), target_owner, target);
    let features = feature_names
        .into_iter()
        .zip(owners)
        .zip(features)
        .map(|((n, o), v)| Series::new(n, o, v))
        .collect();
    Dataset::new(timestamps, target, features)
}

/// Writes `timestamp,<target>,<features...>`. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string(), dataset.target.name.clone()];
    header.extend(dataset.features.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    for t in 0..dataset.len() {
        let mut row = vec![
            dataset.timestamps[t].label.clone(),
            dataset.target.values[t].to_string(),
        ];
        row.extend(dataset.features.iter().map(|s| s.values[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema that reads back what [`write_csv`] wrote for `dataset`.
pub fn schema_for(dataset: &Dataset) -> CsvSchema {
    CsvSchema {
        timestamp: "timestamp".into(),
        target: dataset.target.name.clone(),
        target_owner: Some(dataset.target.owner.clone()),
        features: dataset.features.iter().map(|s| s.name.clone()).collect(),
        ownership: dataset
            .features
            .iter()
            .map(|s| (s.name.clone(), s.owner.clone()))
            .collect(),
        capacities: BTreeMap::new(),
        normalize: false,
    }
}

/// Lags per series name (target or feature).
pub type LagSpec = BTreeMap<String, Vec<usize>>;

pub fn lag_column_name(source: &str, lag: usize) -> String {
    format!("{source}_lag{lag}")
}

/// Appends lagged copies of the requested series and drops the first
/// `max lag` rows so that no row refers to unavailable history. Lagged
/// columns inherit the owner of their source series.
pub fn make_lags(dataset: &Dataset, lags: &LagSpec) -> Result<Dataset> {
    let mut max_lag = 0;
    for (name, ls) in lags {
        if name != &dataset.target.name {
            dataset.feature(name)?;
        }
        for &d in ls {
            if d == 0 {
                return Err(MarketError::Parameter(format!("lag of `{name}` must be at least 1")));
            }
            max_lag = max_lag.max(d);
        }
    }
    if max_lag == 0 {
        return Ok(dataset.clone());
    }
    let t = dataset.len();
    if t <= max_lag {
        return Err(MarketError::InsufficientData(format!(
            "{t} rows cannot support a lag of {max_lag}"
        )));
    }
    let keep = max_lag..t;
    let trimmed = |s: &Series| Series {
        values: s.values[keep.clone()].to_vec(),
        ..s.clone()
    };
    let mut features: Vec<Series> = dataset.features.iter().map(trimmed).collect();
    for source in std::iter::once(&dataset.target).chain(dataset.features.iter()) {
        let Some(ls) = lags.get(&source.name) else { continue };
        let mut ls = ls.clone();
        ls.sort_unstable();
        ls.dedup();
        for d in ls {
            features.push(Series {
                name: lag_column_name(&source.name, d),
                owner: source.owner.clone(),
                values: source.values[max_lag - d..t - d].to_vec(),
                origin: Some(LagOrigin {
                    source: source.name.clone(),
                    lag: d,
                }),
            });
        }
    }
    let target = trimmed(&dataset.target);
    Dataset::new(dataset.timestamps[keep].to_vec(), target, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        CsvSchema::new("ts", "y").owned("x2", "a2").owned("y", "a1")
    }

    #[test]
    fn smallest_valid_file() {
        let csv = "ts,y,x2\n0,1.0,2.0\n1,1.5,2.5\n2,2.0,3.0\n";
        let d = ingest_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.features().len(), 1);
        assert_eq!(d.owner_of("x2").unwrap().as_str(), "a2");
        assert_eq!(d.target().owner.as_str(), "a1");
    }

    #[test]
    fn missing_target_column_is_a_schema_error() {
        let csv = "ts,x2\n0,2.0\n";
        let err = ingest_reader(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, MarketError::Schema(_)), "{err}");
    }

    #[test]
    fn bad_cells_report_line_numbers() {
        let csv = "ts,y,x2\n0,1.0,2.0\n1,oops,2.5\n";
        match ingest_reader(csv.as_bytes(), &schema()).unwrap_err() {
            MarketError::Row { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let csv = "ts,y,x2\n0,1.0,2.0\n1,1.0,\n";
        match ingest_reader(csv.as_bytes(), &schema()).unwrap_err() {
            MarketError::Row { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("missing"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let csv = "ts,y,x2\n0,1,2\n2,1,2\n2,1,2\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &schema()).unwrap_err(),
            MarketError::Ordering { row: 2 }
        ));
    }

    #[test]
    fn iso_timestamps_parse() {
        let csv = "ts,y,x2\n2007-01-01 00:00:00,1,2\n2007-01-01T01:00:00Z,1,2\n2007-01-01T02:00,1,2\n";
        let d = ingest_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.timestamps()[1].key - d.timestamps()[0].key, 3600);
        assert_eq!(d.timestamps()[2].key - d.timestamps()[1].key, 3600);
    }

    #[test]
    fn capacity_normalization() {
        let mut s = schema();
        s.normalize = true;
        s.capacities.insert("y".into(), 2.96);
        s.capacities.insert("x2".into(), 2.0);
        let csv = "ts,y,x2\n0,1.48,1.0\n";
        let d = ingest_reader(csv.as_bytes(), &s).unwrap();
        assert!((d.target().values[0] - 0.5).abs() < 1e-15);
        assert!((d.features()[0].values[0] - 0.5).abs() < 1e-15);

        let csv = "ts,y,x2\n0,3.5,1.0\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &s).unwrap_err(),
            MarketError::Row { .. }
        ));
    }

    #[test]
    fn unowned_feature_rejected() {
        let csv = "ts,y,x2,x3\n0,1,2,3\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &schema()).unwrap_err(),
            MarketError::Schema(_)
        ));
    }

    #[test]
    fn lag_shift_by_one() {
        let d = Dataset::indexed(Series::new("y", "a1", vec![1.0, 2.0, 3.0]), vec![]).unwrap();
        let lagged = make_lags(&d, &LagSpec::from([("y".to_string(), vec![1])])).unwrap();
        assert_eq!(lagged.target().values, vec![2.0, 3.0]);
        let col = lagged.feature("y_lag1").unwrap();
        assert_eq!(col.values, vec![1.0, 2.0]);
        assert_eq!(col.owner.as_str(), "a1");
        assert_eq!(lagged.timestamps()[0].key, 1);
    }

    #[test]
    fn lag_trims_rows() {
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let d = Dataset::indexed(Series::new("y", "a1", y), vec![]).unwrap();
        let lagged = make_lags(&d, &LagSpec::from([("y".to_string(), vec![1, 2])])).unwrap();
        assert_eq!(lagged.len(), 8);
        assert_eq!(lagged.feature("y_lag2").unwrap().values[0], 0.0);
        assert_eq!(lagged.feature("y_lag1").unwrap().values[0], 1.0);
    }

    #[test]
    fn arx_lags_on_target_and_support_features() {
        let n = 6;
        let v = |k: f64| (0..n).map(|i| k + i as f64).collect::<Vec<_>>();
        let d = Dataset::indexed(
            Series::new("y", "a1", v(0.0)),
            vec![
                Series::new("x2", "a2", v(10.0)),
                Series::new("x3", "a3", v(20.0)),
                Series::new("x4", "a3", v(30.0)),
            ],
        )
        .unwrap();
        let spec: LagSpec = ["y", "x2", "x3", "x4"]
            .iter()
            .map(|s| (s.to_string(), vec![1]))
            .collect();
        let lagged = make_lags(&d, &spec).unwrap();
        let lag_cols: Vec<_> = lagged.features().iter().filter(|s| s.origin.is_some()).collect();
        assert_eq!(lag_cols.len(), 4);
        assert_eq!(lag_cols[0].name, "y_lag1");
        assert_eq!(lagged.owner_of("x4_lag1").unwrap().as_str(), "a3");
    }

    #[test]
    fn lag_errors() {
        let d = Dataset::indexed(Series::new("y", "a1", vec![1.0, 2.0]), vec![]).unwrap();
        assert!(matches!(
            make_lags(&d, &LagSpec::from([("y".to_string(), vec![0])])).unwrap_err(),
            MarketError::Parameter(_)
        ));
        assert!(matches!(
            make_lags(&d, &LagSpec::from([("y".to_string(), vec![2])])).unwrap_err(),
            MarketError::InsufficientData(_)
        ));
        assert!(matches!(
            make_lags(&d, &LagSpec::from([("zz".to_string(), vec![1])])).unwrap_err(),
            MarketError::Lookup(_)
        ));
    }

    #[test]
    fn with_target_swaps_columns() {
        let d = Dataset::indexed(
            Series::new("y1", "a1", vec![1.0, 2.0]),
            vec![Series::new("y2", "a2", vec![3.0, 4.0])],
        )
        .unwrap();
        let s = d.with_target("y2").unwrap();
        assert_eq!(s.target().name, "y2");
        assert_eq!(s.target().owner.as_str(), "a2");
        assert_eq!(s.feature_names(), vec!["y1"]);
    }
}
