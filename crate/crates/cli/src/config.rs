//! Run configuration: a TOML document with one section per concern.
//!
//! ```toml
//! schema_version = 1
//!
//! [data]
//! scenario = "batch-linear"   # or: csv = "path/to/data.csv"
//! seed = 7
//!
//! [data.schema]               # only with csv
//! timestamp = "timestamp"
//! target = "y"
//! target_owner = "a1"
//! ownership = { x1 = "a1", x2 = "a2" }
//!
//! [task]
//! central_agent = "a1"
//! phi_insample = 0.1
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use regression_markets::data::{ingest_csv, CsvSchema};
use regression_markets::simulation::{generate, CaseId, GroundTruth, ScenarioSpec};
use regression_markets::task::TaskSpec;
use regression_markets::{Dataset, MarketError, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub csv: Option<PathBuf>,
    pub schema: Option<CsvSchema>,
    /// Path to a JSON schema file, as written by `simulate`.
    pub schema_file: Option<PathBuf>,
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub t: Option<usize>,
    pub noise_sd: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSource,
    pub task: TaskSpec,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataSource::default(),
            task: TaskSpec::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| MarketError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(MarketError::Config(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.scenario) {
            (Some(_), Some(_)) => Err(MarketError::Config(
                "give either a csv path or a scenario, not both".into(),
            )),
            (None, None) => Err(MarketError::Config(
                "no dataset source: give a csv path or a scenario".into(),
            )),
            _ => self.task.validate(),
        }
    }

    pub fn scenario_spec(&self) -> Result<Option<ScenarioSpec>> {
        let Some(name) = &self.data.scenario else {
            return Ok(None);
        };
        let case: CaseId = name
            .parse()
            .map_err(|e: MarketError| MarketError::Config(e.to_string()))?;
        let mut spec = ScenarioSpec::new(case);
        if let Some(seed) = self.data.seed {
            spec.seed = seed;
        }
        if let Some(t) = self.data.t {
            spec.t = t;
        }
        if let Some(sd) = self.data.noise_sd {
            spec.noise_sd = sd;
        }
        Ok(Some(spec))
    }

    pub fn load_dataset(&self) -> Result<(Dataset, Option<GroundTruth>)> {
        self.validate()?;
        if let Some(spec) = self.scenario_spec()? {
            let (ds, truth) = generate(&spec)?;
            return Ok((ds, Some(truth)));
        }
        let path = self.data.csv.as_ref().expect("validated");
        let schema = match (&self.data.schema, &self.data.schema_file) {
            (Some(s), None) => s.clone(),
            (None, Some(p)) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            (Some(_), Some(_)) => {
                return Err(MarketError::Config(
                    "give either an inline schema or a schema file".into(),
                ))
            }
            (None, None) => return Err(MarketError::Config("csv input needs a column schema".into())),
        };
        Ok((ingest_csv(path, &schema)?, None))
    }
}
