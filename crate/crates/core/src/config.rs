//! TOML run configuration.
//!
//! ```toml
//! schema = "morph"            # or an inline [schema] table
//!
//! [train]
//! epochs = 200
//! batch_size = 16
//! learning_rate = 0.0005
//! seed = 1
//! loss = "ecr"                # ecr | l1 | ce
//! attribute_guidance = true
//! preset = "desk"             # desk | paper
//!
//! [synthetic]                 # or [manifest] with path = "..."
//! resolution = 64
//! a_min = 16
//! a_max = 77
//! noise_sigma = 0.05
//! seed = 7
//! train = 64
//! val = 16
//! test = 16
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::head::{AttributeCoefficients, AttributeSchema};
use crate::marcu::{NetworkConfig, Preset};
use crate::model::{LossOptions, ModelSpec};
use crate::optim::AdamConfig;
use crate::ranking::{LossKind, Reduction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub attribute_guidance: bool,
    pub coefficients: AttributeCoefficients,
    pub reduction: Reduction,
    pub preset: Preset,
    /// Square crop fed to the network; defaults to the full image.
    pub crop: Option<usize>,
    pub fuse_kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.0005,
            seed: 0,
            loss: LossKind::Ecr,
            attribute_guidance: true,
            coefficients: AttributeCoefficients::default(),
            reduction: Reduction::Sum,
            preset: Preset::Desk,
            crop: None,
            fuse_kernel: 3,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            attribute_guidance: self.attribute_guidance,
            coefficients: self.coefficients,
            reduction: self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate {} must be finite and ≥ 0",
                self.learning_rate
            )));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("train.crop must be positive".into()));
        }
        let c = self.coefficients;
        if [c.alpha, c.beta, c.gamma].iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("train.coefficients must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSpec {
    Named(String),
    Custom(AttributeSchema),
}

impl SchemaSpec {
    pub fn resolve(&self) -> Result<AttributeSchema> {
        let schema = match self {
            SchemaSpec::Named(n) => AttributeSchema::by_name(n).map_err(|e| Error::Config(format!("schema: {e}")))?,
            SchemaSpec::Custom(s) => s.clone(),
        };
        schema.validate().map_err(|e| Error::Config(format!("schema: {e}")))?;
        Ok(schema)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSource {
    pub path: PathBuf,
    /// Seed of the 8:1:1 split; defaults to `train.seed`.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestSource>,
}

impl RunConfig {
    /// Parses TOML; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves a relative manifest path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(m) = &mut cfg.manifest {
            if m.path.is_relative() {
                m.path = path.parent().unwrap_or(Path::new(".")).join(&m.path);
            }
            if !m.path.is_file() {
                return Err(Error::Config(format!("manifest.path: {} does not exist", m.path.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let schema = self.schema.resolve()?;
        match (&self.synthetic, &self.manifest) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("exactly one of [synthetic] or [manifest] is required".into()))
            }
            (Some(s), None) => {
                s.validate().map_err(|e| Error::Config(format!("synthetic: {e}")))?;
                if s.a_min < schema.a_min || s.a_max > schema.a_max {
                    return Err(Error::Config(format!(
                        "synthetic: ages {}..={} exceed schema range {}..={}",
                        s.a_min, s.a_max, schema.a_min, schema.a_max
                    )));
                }
                if self.train.crop.is_some_and(|c| c > s.resolution) {
                    return Err(Error::Config(format!(
                        "train.crop exceeds synthetic resolution {}",
                        s.resolution
                    )));
                }
            }
            (None, Some(_)) => {}
        }
        if let Some(res) = self.known_crop() {
            self.network(res).validate().map_err(|e| Error::Config(format!("network: {e}")))?;
        }
        Ok(())
    }

    fn known_crop(&self) -> Option<usize> {
        self.train.crop.or(self.synthetic.as_ref().map(|s| s.resolution))
    }

    /// Network input side given the size of the stored images.
    pub fn crop(&self, image_size: usize) -> usize {
        self.known_crop().unwrap_or(image_size)
    }

    pub fn network(&self, resolution: usize) -> NetworkConfig {
        NetworkConfig {
            input_resolution: resolution,
            ..NetworkConfig::preset(self.train.preset)
        }
    }

    pub fn model_spec(&self, resolution: usize) -> Result<ModelSpec> {
        Ok(ModelSpec {
            fuse_kernel: self.train.fuse_kernel,
            ..ModelSpec::new(self.network(resolution), self.schema.resolve()?, self.train.loss)
        })
    }

    pub fn split_seed(&self) -> u64 {
        self.manifest
            .as_ref()
            .and_then(|m| m.split_seed)
            .unwrap_or(self.train.seed)
    }
}
