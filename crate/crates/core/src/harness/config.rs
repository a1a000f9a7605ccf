use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::LatencyTable;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::search::{SearchConfig, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BUDGET: u64 = 3_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub dataset: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Seeds synthetic generation and every split permutation.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleSpace {
    Linear,
    #[default]
    Log,
}

/// Which resource model's λ a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SweepModel {
    #[default]
    Params,
    Macs,
    Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLine {
    pub label: String,
    pub value: f64,
    pub style: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_low_exp: f64,
    pub lambda_high_exp: f64,
    pub num_samples: usize,
    pub seeds_per_lambda: usize,
    #[serde(default)]
    pub sample_space: SampleSpace,
    #[serde(default)]
    pub model: SweepModel,
    /// Seeds the λ draws; trial seeds come from the search seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reference_lines: Vec<ReferenceLine>,
}

impl SweepConfig {
    pub fn coarse() -> Self {
        SweepConfig {
            lambda_low_exp: -11.0,
            lambda_high_exp: -6.0,
            num_samples: 16,
            seeds_per_lambda: 1,
            sample_space: SampleSpace::Log,
            model: SweepModel::Params,
            seed: 0,
            reference_lines: vec![
                ReferenceLine {
                    label: "published_pdarts".into(),
                    value: 3.4e6,
                    style: "dashed".into(),
                },
                ReferenceLine {
                    label: "smallest_pdarts_found".into(),
                    value: 3.4e6,
                    style: "dashdot".into(),
                },
            ],
        }
    }

    pub fn fine() -> Self {
        SweepConfig {
            lambda_low_exp: -6.24,
            lambda_high_exp: -6.2,
            ..SweepConfig::coarse()
        }
    }

    pub fn desk() -> Self {
        SweepConfig {
            lambda_low_exp: -9.0,
            lambda_high_exp: -4.0,
            num_samples: 8,
            seeds_per_lambda: 3,
            reference_lines: Vec::new(),
            ..SweepConfig::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_low_exp < self.lambda_high_exp) {
            return Err(Error::Config(format!(
                "sweep needs lambda_low_exp < lambda_high_exp, got {} and {}",
                self.lambda_low_exp, self.lambda_high_exp
            )));
        }
        if self.num_samples == 0 || self.seeds_per_lambda == 0 {
            return Err(Error::Config("sweep needs num_samples ≥ 1 and seeds_per_lambda ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything a command needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub data: DataConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            budget: DEFAULT_BUDGET,
            latency_table: None,
            workers: None,
            data: DataConfig {
                dataset: DatasetKind::Synthetic,
                data_dir: None,
                seed: 0,
            },
            search: SearchConfig::desk(),
            train: TrainConfig::desk(),
            sweep: SweepConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            data: DataConfig {
                dataset: DatasetKind::Cifar10,
                data_dir: Some(PathBuf::from("data/cifar-10-batches-bin")),
                seed: 0,
            },
            search: SearchConfig::paper(),
            train: TrainConfig::paper(),
            sweep: SweepConfig::coarse(),
            ..RunConfig::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.data.dataset == DatasetKind::Cifar10 && self.data.data_dir.is_none() {
            return Err(Error::Config("the cifar10 dataset needs data_dir".into()));
        }
        self.search.validate()?;
        self.train.validate()?;
        self.sweep.validate()
    }

    /// Applies command-line overrides, then re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.search.seed = s;
        }
        if let Some(d) = o.dataset {
            self.data.dataset = d;
        }
        if let Some(p) = &o.data_dir {
            self.data.data_dir = Some(p.clone());
        }
        if let Some(l) = o.lambda_params {
            self.search.lambdas.params = l;
        }
        if let Some(l) = o.lambda_macs {
            self.search.lambdas.macs = l;
        }
        if let Some(l) = o.lambda_latency {
            self.search.lambdas.latency = l;
        }
        if let Some(p) = &o.latency_table {
            self.latency_table = Some(p.clone());
        }
        if let Some(b) = o.budget {
            self.budget = b;
        }
        if let Some(w) = o.workers {
            self.workers = Some(w);
        }
        self.validate()
    }

    pub fn splits(&self) -> Result<Splits> {
        match self.data.dataset {
            DatasetKind::Synthetic => Splits::synthetic(self.data.seed, self.search.num_classes),
            DatasetKind::Cifar10 => {
                let dir = self
                    .data
                    .data_dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("the cifar10 dataset needs data_dir".into()))?;
                Splits::cifar10(dir, self.data.seed)
            }
        }
    }

    /// The latency table, parsed but not yet checked for coverage.
    pub fn latency(&self) -> Result<Option<Arc<LatencyTable>>> {
        let Some(path) = &self.latency_table else {
            return Ok(None);
        };
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot read latency table {}: {e}", path.display())))?;
        Ok(Some(Arc::new(LatencyTable::parse(std::io::BufReader::new(file))?)))
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub lambda_params: Option<f64>,
    pub lambda_macs: Option<f64>,
    pub lambda_latency: Option<f64>,
    pub latency_table: Option<PathBuf>,
    pub budget: Option<u64>,
    pub workers: Option<usize>,
}
