//! One TOML file drives a whole experiment. Any key can be overridden from
//! the environment: `DEMANDKIT_STAGE2__EPOCHS=5` sets `stage2.epochs`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use demandkit::attribution::DEFAULT_STEPS;
use demandkit::counterfactual::{SweepFeature, SweepSpec};
use demandkit::metrics::DEFAULT_HIT_TOLERANCE;
use demandkit::ols::HedonicSpec;
use demandkit::simulator::{GroundTruthMap, SimulationConfig};
use demandkit::stage1::Stage1Config;
use demandkit::stage2::{DirectConfig, Stage2Config};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "DEMANDKIT_";
const ENV_SEPARATOR: &str = "__";

/// Input and output locations. Relative paths resolve against `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub models: PathBuf,
    /// External `DEV v1` embedding file used by Stage 2 instead of the
    /// Stage-1 encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            models: PathBuf::from("models"),
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ts,
    De,
    Ols,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Ts => "ts",
            ModelKind::De => "de",
            ModelKind::Ols => "ols",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        match s.trim() {
            "ts" => Ok(ModelKind::Ts),
            "de" => Ok(ModelKind::De),
            "ols" => Ok(ModelKind::Ols),
            other => Err(CliError::config(format!("unknown model {other:?}; expected ts, de or ols"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub models: Vec<ModelKind>,
    pub hit_tolerance: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            models: vec![ModelKind::Ts, ModelKind::Ols],
            hit_tolerance: DEFAULT_HIT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// `stage1:<output>` (e.g. `stage1:log_b2`) over the feature vector, or
    /// `stage2:rank<j>` over the embedding.
    pub target: String,
    pub steps: usize,
    /// Listings to attribute; empty means the first `count` validation listings.
    pub listings: Vec<String>,
    pub count: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            target: "stage1:log_b2".into(),
            steps: DEFAULT_STEPS,
            listings: Vec::new(),
            count: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepModel {
    TwoStage,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub model: SweepModel,
    pub feature: SweepFeature,
    pub grid: Vec<f64>,
    pub sample_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let spec = SweepSpec::default();
        SweepConfig {
            model: SweepModel::TwoStage,
            feature: spec.feature,
            grid: spec.grid,
            sample_size: spec.sample_size,
        }
    }
}

impl SweepConfig {
    pub fn spec(&self) -> SweepSpec {
        SweepSpec {
            feature: self.feature,
            grid: self.grid.clone(),
            sample_size: self.sample_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub out: PathBuf,
    pub paths: PathsConfig,
    pub ground_truth: GroundTruthMap,
    pub simulation: SimulationConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub direct: DirectConfig,
    pub ols: HedonicSpec,
    pub evaluation: EvaluationConfig,
    pub attribution: AttributionConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            out: PathBuf::from("run"),
            paths: PathsConfig::default(),
            ground_truth: GroundTruthMap::default(),
            simulation: SimulationConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            direct: DirectConfig::default(),
            ols: HedonicSpec::default(),
            evaluation: EvaluationConfig::default(),
            attribution: AttributionConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> CliResult<()> {
    let (last, parents) = path.split_last().ok_or_else(|| CliError::config("empty override key"))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {}: {p:?} is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Applies `DEMANDKIT_*` variables from `vars` onto a parsed config table.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> CliResult<Vec<String>>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split(ENV_SEPARATOR)
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::config(format!("malformed override variable {key}")));
        }
        set_path(table, &path, parse_env_value(&raw))?;
        applied.push(path.join("."));
    }
    Ok(applied)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        Self::from_sources(text, std::iter::empty())
    }

    /// Parses `text`, layers the environment overrides on top and validates.
    pub fn from_sources<I>(text: &str, env: I) -> CliResult<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        let applied = apply_env_overrides(&mut table, env)?;
        for key in applied {
            log::info!("config override from environment: {key}");
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_sources(&text, std::env::vars())
    }

    pub fn validate(&self) -> CliResult<()> {
        let q = |m: &'static str| move |e: demandkit::Error| CliError::from_core(m, e).as_config();
        self.simulation.validate(&self.ground_truth).map_err(q("simulation"))?;
        self.stage1.validate().map_err(q("stage1"))?;
        self.stage2.validate().map_err(q("stage2"))?;
        self.sweep.spec().validate().map_err(q("sweep"))?;
        if self.direct.hidden == 0 || self.direct.embedding_dim < 2 {
            return Err(CliError::config("direct: hidden and embedding_dim must be positive"));
        }
        if self.attribution.steps == 0 {
            return Err(CliError::config("attribution: steps must be positive"));
        }
        crate::commands::AttributionTarget::parse(&self.attribution.target, self.stage2.j_max)?;
        if !(self.evaluation.hit_tolerance >= 0.0) {
            return Err(CliError::config("evaluation: hit_tolerance must be non-negative"));
        }
        if self.evaluation.models.is_empty() {
            return Err(CliError::config("evaluation: no models selected"));
        }
        Ok(())
    }

    /// Canonical serialization used for the manifest hash. The output
    /// directory is left out so identical runs in different places hash alike.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::from(".");
        toml::to_string(&c).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.paths.data)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.resolve(&self.paths.models)
    }

    pub fn embeddings_path(&self) -> Option<PathBuf> {
        self.paths.embeddings.as_deref().map(|p| self.resolve(p))
    }
}
