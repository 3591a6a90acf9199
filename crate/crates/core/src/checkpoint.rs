//! Model checkpoints: architecture config (TOML text) plus named parameter
//! tensors in one [`TensorArchive`].
//!
//! Metadata keys: `format` (`patho-checkpoint/1`), `kind`
//! (`detector` | `generator` | `discriminator` | `feature-net`) and `config`
//! (TOML). Tensors are stored as `param:<name>` and `buffer:<name>`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "patho-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Detector,
    Generator,
    Discriminator,
    FeatureNet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Detector => "detector",
            ModelKind::Generator => "generator",
            ModelKind::Discriminator => "discriminator",
            ModelKind::FeatureNet => "feature-net",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(ModelKind::Detector),
            "generator" => Ok(ModelKind::Generator),
            "discriminator" => Ok(ModelKind::Discriminator),
            "feature-net" => Ok(ModelKind::FeatureNet),
            other => Err(Error::Archive(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: ModelKind,
    pub config: String,
    pub params: ParamStore,
}

impl ModelCheckpoint {
    pub fn new<C: Serialize>(kind: ModelKind, config: &C, params: ParamStore) -> Result<Self> {
        let config = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { kind, config, params })
    }

    pub fn parse_config<C: DeserializeOwned>(&self) -> Result<C> {
        toml::from_str(&self.config).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.metadata.insert("format".into(), FORMAT.into());
        a.metadata.insert("kind".into(), self.kind.to_string());
        a.metadata.insert("config".into(), self.config.clone());
        self.params.write_into(&mut a);
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let format = a.meta("format")?;
        if format != FORMAT {
            return Err(Error::Archive(format!("unsupported checkpoint format `{format}`")));
        }
        Ok(Self {
            kind: a.meta("kind")?.parse()?,
            config: a.meta("config")?.to_string(),
            params: ParamStore::read_from(a),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&TensorArchive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
