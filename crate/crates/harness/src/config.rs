//! Experiment configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use cvpb_core::adapters::{AdaptConfig, Method};
use cvpb_core::corruption::CorruptionKind;
use cvpb_core::models::{BackboneConfig, SslConfig, TrainHyper};
use cvpb_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::data::{io_err, ShapesParams};

/// Environment variable that overrides `out_dir`.
pub const OUT_ENV: &str = "CVPB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 { path: PathBuf },
    /// Procedural shapes; the eval split uses a different seed than training.
    Shapes {
        #[serde(flatten)]
        params: ShapesParams,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Shapes {
            params: ShapesParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub train: TrainHyper,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                widths: vec![16, 32, 64, 64],
                ..Default::default()
            },
            train: TrainHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslSection {
    pub contrastive: SslConfig,
    pub train: TrainHyper,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            contrastive: SslConfig::default(),
            train: TrainHyper {
                steps: 300,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Images per (kind, severity) cell, taken from the front of the eval split.
    pub eval_count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::IMPLEMENTED.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            eval_count: 1000,
        }
    }
}

/// One entry of the method list, optionally with its own adaptation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub method: Method,
    /// Replaces the experiment-wide `adapt` section for this method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptConfig>,
    /// Label used in records; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodEntry {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            adapt: None,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Method whose errors the summary differences are taken against.
    pub baseline: String,
    pub data: DataSource,
    pub model: ModelSection,
    pub ssl: SslSection,
    pub grid: GridConfig,
    pub adapt: AdaptConfig,
    pub methods: Vec<MethodEntry>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out_dir: PathBuf::from("runs/default"),
            baseline: "standard".into(),
            data: DataSource::default(),
            model: ModelSection::default(),
            ssl: SslSection::default(),
            grid: GridConfig::default(),
            adapt: AdaptConfig::default(),
            methods: vec![MethodEntry::new(Method::Standard), MethodEntry::new(Method::Cvp)],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| io_err(path, e))
    }

    /// `out_dir`, unless overridden by `CVPB_OUT`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("method list is empty".into()));
        }
        if let Some(&s) = self.grid.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::InvalidArgument(format!("severity {s} outside 1..=5")));
        }
        if let Some(k) = self.grid.kinds.iter().find(|k| !k.is_implemented()) {
            return Err(Error::InvalidArgument(format!("corruption '{}' is not implemented", k.name())));
        }
        if self.grid.eval_count == 0 {
            return Err(Error::InvalidArgument("eval_count must be at least 1".into()));
        }
        self.adapt.validate()?;
        for m in &self.methods {
            if let Some(a) = &m.adapt {
                a.validate()?;
            }
        }
        Ok(())
    }

    pub fn adapt_for(&self, entry: &MethodEntry) -> AdaptConfig {
        entry.adapt.clone().unwrap_or_else(|| self.adapt.clone())
    }
}
