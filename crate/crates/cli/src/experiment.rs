//! The experiment file: one JSON document describing datasets, orderings,
//! strategy, loss and trainer settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use braincl::losses::LossConfig;
use braincl::synthdata::DatasetSpec;
use braincl::trainer::{SequenceConfig, Strategy, TrainerConfig};
use braincl::ModalityUniverse;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A preset name such as `"naive"` or a full strategy object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategyChoice {
    Preset(String),
    Custom(Strategy),
}

impl Default for StrategyChoice {
    fn default() -> Self {
        StrategyChoice::Preset("proposed".into())
    }
}

impl StrategyChoice {
    pub fn resolve(&self) -> braincl::Result<Strategy> {
        match self {
            StrategyChoice::Preset(name) => Strategy::preset(name),
            StrategyChoice::Custom(s) => Ok(s.clone()),
        }
    }
}

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_data_root() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths are resolved against the experiment file's directory.
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default = "default_data_root")]
    pub data_root: PathBuf,
    #[serde(default)]
    pub universe: ModalityUniverse,
    pub datasets: Vec<DatasetSpec>,
    /// Named orderings of dataset ids. Without any, datasets run in file order.
    #[serde(default)]
    pub sequences: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

/// Overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub sequence: Option<String>,
}

/// A loaded experiment with paths made absolute.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub file: ExperimentFile,
    pub path: PathBuf,
    pub data_root: PathBuf,
    pub output_root: PathBuf,
}

fn at(path: &str) -> impl Fn(braincl::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Validation(msg) => CliError::Validation(format!("{path}: {msg}")),
        other => other,
    }
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Validation(format!("{path}: {inner}"))
        })
    }

    /// Checks everything that does not depend on overrides.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(CliError::Validation("name: must be non-empty".into()));
        }
        if self.name.contains(['/', '\\']) {
            return Err(CliError::Validation("name: must not contain path separators".into()));
        }
        self.universe.validate().map_err(at("universe"))?;
        if self.datasets.is_empty() {
            return Err(CliError::Validation("datasets: at least one dataset is required".into()));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            let path = format!("datasets[{i}]");
            d.validate(&self.universe).map_err(at(&path))?;
            if self.datasets[..i].iter().any(|o| o.id == d.id) {
                return Err(CliError::Validation(format!("{path}.id: duplicate dataset id {:?}", d.id)));
            }
        }
        for (name, order) in &self.sequences {
            for (k, id) in order.iter().enumerate() {
                if !self.datasets.iter().any(|d| &d.id == id) {
                    return Err(CliError::Validation(format!(
                        "sequences.{name}[{k}]: dataset {id:?} is not defined"
                    )));
                }
            }
            if order.is_empty() {
                return Err(CliError::Validation(format!("sequences.{name}: must list at least one dataset")));
            }
        }
        self.strategy.resolve().and_then(|s| s.validate()).map_err(at("strategy"))?;
        self.loss.validate().map_err(at("loss"))?;
        Ok(())
    }

    /// Builds the trainer configuration for one run.
    pub fn sequence_config(&self, ov: &RunOverrides) -> Result<SequenceConfig, CliError> {
        let strategy = match &ov.strategy {
            Some(name) => Strategy::preset(name).map_err(at("--strategy"))?,
            None => self.strategy.resolve().map_err(at("strategy"))?,
        };
        strategy.validate().map_err(at("strategy"))?;
        let order: Vec<String> = match &ov.sequence {
            Some(name) => self
                .sequences
                .get(name)
                .cloned()
                .ok_or_else(|| CliError::Validation(format!("--sequence: no sequence named {name:?}")))?,
            None => self.datasets.iter().map(|d| d.id.clone()).collect(),
        };
        let datasets = order
            .iter()
            .map(|id| {
                self.datasets
                    .iter()
                    .find(|d| &d.id == id)
                    .cloned()
                    .ok_or_else(|| CliError::Validation(format!("dataset {id:?} is not defined")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut name = format!(
            "{}-{}-seed{}",
            self.name,
            strategy.preset_name().map(str::to_string).unwrap_or_else(|| "custom".into()),
            ov.seed.unwrap_or(self.seed)
        );
        if let Some(seq) = &ov.sequence {
            name = format!("{name}-{seq}");
        }
        let cfg = SequenceConfig {
            name,
            universe: self.universe.clone(),
            datasets,
            strategy,
            loss: self.loss.clone(),
            trainer: self.trainer.clone(),
            seed: ov.seed.unwrap_or(self.seed),
        };
        validate_sequence(&cfg)?;
        Ok(cfg)
    }
}

fn validate_sequence(cfg: &SequenceConfig) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::from)
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let file = ExperimentFile::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
        file.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut output_root = resolve(&file.output_root);
        if let Some(root) = std::env::var_os("BRAINCL_RUNS_ROOT").filter(|v| !v.is_empty()) {
            output_root = PathBuf::from(root);
        }
        Ok(Self {
            data_root: resolve(&file.data_root),
            output_root,
            path: path.to_path_buf(),
            file,
        })
    }
}
