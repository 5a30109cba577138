//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[probe]` sections, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transip::eval::ProbeConfig;
use transip::model::ModelConfig;
use transip::moldata::{GeneratorConfig, DEFAULT_PALETTE};
use transip::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training set (JSON Lines).
    pub train: Option<PathBuf>,
    /// Evaluation sets keyed by category tag.
    pub eval: BTreeMap<String, PathBuf>,
    /// Generator settings for `gen-data`.
    pub count: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    pub palette: Vec<u32>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            train: None,
            eval: BTreeMap::new(),
            count: g.count,
            atoms_min: g.atoms_min,
            atoms_max: g.atoms_max,
            palette: DEFAULT_PALETTE.to_vec(),
            seed: g.seed,
        }
    }
}

impl DataConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            count: self.count,
            atoms_min: self.atoms_min,
            atoms_max: self.atoms_max,
            palette: self.palette.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory.
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Whether the file set `[model]`; checkpoints are then checked against it.
    #[serde(skip)]
    pub model_given: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("transip-out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            model_given: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let model_given = table.contains_key("model");
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.model_given = model_given;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// One seed drives data generation, training and the probes.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}

/// Parses `tag=path`; a bare path is tagged by its file stem.
pub fn parse_tagged(arg: &str) -> Result<(String, PathBuf), String> {
    match arg.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !path.is_empty() => Ok((tag.to_string(), PathBuf::from(path))),
        Some(_) => Err(format!("expected TAG=PATH, got {arg:?}")),
        None => {
            let path = PathBuf::from(arg);
            let tag =
                path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| format!("cannot derive a tag from {arg:?}"))?;
            Ok((tag.to_string(), path))
        }
    }
}
