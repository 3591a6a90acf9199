//! Run configuration shared by the subcommands. Every section is optional;
//! the preset fills in the architectures.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patho_core::detector::{DetectorConfig, DetectorSchedule};
use patho_core::pathogan::{DiscriminatorConfig, FeatureNet, FeatureNetConfig, GanSchedule, GeneratorConfig};
use patho_core::preprocess::PreprocessSpec;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64 x 64, narrow networks, random-frozen perceptual net; CPU-friendly.
    #[default]
    Desk,
    /// 512 x 512 reference architectures; needs converted VGG-19 weights.
    Full,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Converted VGG-19 weights (torchvision names) or a feature-net
    /// checkpoint. Required by the full preset.
    pub weights: Option<PathBuf>,
    /// Seed of the random reduced net used when no weights are given.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub preprocess: Option<PreprocessSpec>,
    pub detector: Option<DetectorConfig>,
    pub detector_schedule: DetectorSchedule,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub gan: GanSchedule,
    pub perceptual: PerceptualConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(w) = &cfg.perceptual.weights {
            cfg.perceptual.weights = Some(path.parent().unwrap_or(Path::new(".")).join(w));
        }
        Ok(cfg)
    }

    pub fn image_size(&self) -> usize {
        match self.preset {
            Preset::Desk => 64,
            Preset::Full => 512,
        }
    }

    pub fn preprocess(&self) -> PreprocessSpec {
        self.preprocess.unwrap_or(PreprocessSpec {
            target_size: self.image_size(),
            ..PreprocessSpec::default()
        })
    }

    pub fn detector(&self) -> DetectorConfig {
        self.detector.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => DetectorConfig::desk_64(),
            Preset::Full => DetectorConfig::default_512(),
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        self.generator.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => GeneratorConfig::desk_64(),
            Preset::Full => GeneratorConfig::default_512(),
        })
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        self.discriminator.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => DiscriminatorConfig::desk_64(),
            Preset::Full => DiscriminatorConfig::default_512(),
        })
    }

    /// The frozen perceptual network. The full preset refuses to fall back
    /// to random weights.
    pub fn perceptual_net(&self) -> Result<FeatureNet> {
        match (&self.perceptual.weights, self.preset) {
            (Some(path), _) => Ok(FeatureNet::load(path)?),
            (None, Preset::Desk) => Ok(FeatureNet::random(FeatureNetConfig::reduced(), self.perceptual.seed)),
            (None, Preset::Full) => bail!(
                "the full preset needs pre-trained VGG-19 weights: set [perceptual] weights = \"...\" \
                 (see scripts/export_vgg19.py)"
            ),
        }
    }
}
