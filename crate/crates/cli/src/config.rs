//! The TOML run configuration.
//!
//! A config file must carry `config_version = 1`. Every other key is
//! optional and falls back to the value printed by `htfl defaults`.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use htfl_core::data::{gen_gaussian_mixture, gen_har_like, ingest_csv, CsvSchema, Dataset, HarLikeConfig};
use htfl_core::engine::ExperimentSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{config, CliResult};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "HTFL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub output_dir: PathBuf,
    /// Partition written by `partition` and read by `run`; empty means
    /// `<output_dir>/partition.txt` for `partition` and inline generation
    /// for `run`.
    pub partition_file: String,
    pub dataset: DatasetConfig,
    pub experiment: ExperimentSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            output_dir: PathBuf::from("results"),
            partition_file: String::new(),
            dataset: DatasetConfig::default(),
            experiment: ExperimentSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    GaussianMixture,
    HarLike,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Seed of the synthetic generators; independent of the experiment seed.
    pub seed: u64,
    pub mixture: MixtureConfig,
    pub har: HarLikeConfig,
    pub csv: CsvConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::GaussianMixture,
            seed: 0,
            mixture: MixtureConfig::default(),
            har: HarLikeConfig::default(),
            csv: CsvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub classes: usize,
    pub samples: usize,
    pub dims: usize,
    pub sep: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 4000,
            dims: 32,
            sep: 6.0,
        }
    }
}

/// CSV ingestion schema; empty strings and lists mean "not set".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvConfig {
    pub path: String,
    pub label_col: String,
    pub group_col: String,
    pub feature_cols: Vec<String>,
    /// Channels of a channel-major window; 0 reads the features flat.
    pub sequence_channels: usize,
    pub sequence_length: usize,
    pub standardize: bool,
}

impl Default for CsvConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            label_col: "label".into(),
            group_col: String::new(),
            feature_cols: Vec::new(),
            sequence_channels: 0,
            sequence_length: 0,
            standardize: true,
        }
    }
}

impl CsvConfig {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            label_col: self.label_col.clone(),
            group_col: (!self.group_col.is_empty()).then(|| self.group_col.clone()),
            feature_cols: (!self.feature_cols.is_empty()).then(|| self.feature_cols.clone()),
            sequence: (self.sequence_channels > 0).then_some((self.sequence_channels, self.sequence_length)),
            standardize: self.standardize,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> CliResult<Dataset> {
        let ds = match self.source {
            DataSource::GaussianMixture => {
                let m = &self.mixture;
                gen_gaussian_mixture(m.classes, m.samples, m.dims, m.sep, self.seed)?
            }
            DataSource::HarLike => gen_har_like(&self.har, self.seed)?,
            DataSource::Csv => {
                if self.csv.path.is_empty() {
                    return Err(config("dataset.csv.path must be set when dataset.source = \"csv\""));
                }
                ingest_csv(&self.csv.path, &self.csv.schema())?
            }
        };
        Ok(ds)
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(config(format!(
                "config_version: unsupported version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.experiment
            .validate()
            .map_err(|e| config(format!("experiment: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let table: Table = text.parse().map_err(|e| config(format!("{e}")))?;
        if !table.contains_key("config_version") {
            return Err(config("config_version: missing; add `config_version = 1`"));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> CliResult<Self> {
        let text = toml::to_string(&table).map_err(|e| config(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every leaf key of the default config as `(dotted.path, rendered default)`.
pub fn default_keys() -> Vec<(String, String)> {
    let table = Table::try_from(RunConfig::default()).expect("run config serializes");
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    out
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

/// Reads a value given on the command line: a TOML literal when it parses
/// as one, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets `dotted.path = value`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config(format!("bad key `{path}`")))?;
    let mut cur = table;
    for (depth, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(config(format!(
                    "{}: is not a table",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Builds the effective config: file, then `key=value` overrides, then
/// the seed from the environment.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> CliResult<RunConfig> {
    let text = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config(format!("cannot read {}: {e}", p.display())))?;
            Some((p.display().to_string(), text))
        }
        None => None,
    };
    resolve_text(text.as_ref().map(|(o, t)| (o.as_str(), t.as_str())), overrides, env_seed)
}

/// [`resolve`] over config text already in memory, given as
/// `(origin for messages, text)`.
pub fn resolve_text(
    text: Option<(&str, &str)>,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> CliResult<RunConfig> {
    let mut table = match text {
        Some((origin, text)) => {
            let t: Table = text.parse().map_err(|e| config(format!("{origin}: {e}")))?;
            if !t.contains_key("config_version") {
                return Err(config(format!("{origin}: config_version: missing; add `config_version = 1`")));
            }
            t
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    if let Some(s) = env_seed {
        let seed = s
            .trim()
            .parse::<i64>()
            .ok()
            .filter(|v| *v >= 0)
            .ok_or_else(|| config(format!("{SEED_ENV}: `{s}` is not a non-negative 63-bit integer")))?;
        set_path(&mut table, "experiment.seed", Value::Integer(seed))?;
    }
    RunConfig::from_table(table)
}
