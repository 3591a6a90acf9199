//! Loaded checkpoints. Each model has a one-permit semaphore, so inference
//! on a model is serialized while different models run in parallel.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use patho_core::activation::{build_activation_net, ActivationNet};
use patho_core::api::ModelInfo;
use patho_core::checkpoint::{ModelCheckpoint, ModelKind};
use patho_core::detector::{Detector, DetectorConfig};
use patho_core::pathogan::{Generator, GeneratorConfig};
use tokio::sync::Semaphore;

use crate::error::ApiError;

pub enum LoadedModel {
    Detector { detector: Detector, net: ActivationNet },
    Generator(Generator),
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Detector { .. } => ModelKind::Detector,
            Self::Generator(_) => ModelKind::Generator,
        }
    }
}

struct Slot {
    info: ModelInfo,
    model: Arc<LoadedModel>,
    gate: Arc<Semaphore>,
}

#[derive(Default)]
pub struct ModelRegistry {
    slots: BTreeMap<String, Slot>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_detector(&mut self, id: &str, detector: Detector) -> patho_core::Result<()> {
        let net = build_activation_net(&detector)?;
        let info = ModelInfo {
            id: id.into(),
            kind: ModelKind::Detector,
            image_size: detector.config().input_size,
            fingerprint: detector.params().fingerprint(),
        };
        self.insert(info, LoadedModel::Detector { detector, net });
        Ok(())
    }

    pub fn insert_generator(&mut self, id: &str, generator: Generator) {
        let info = ModelInfo {
            id: id.into(),
            kind: ModelKind::Generator,
            image_size: generator.config().image_size,
            fingerprint: generator.params().fingerprint(),
        };
        self.insert(info, LoadedModel::Generator(generator));
    }

    fn insert(&mut self, info: ModelInfo, model: LoadedModel) {
        let id = info.id.clone();
        let slot = Slot {
            info,
            model: Arc::new(model),
            gate: Arc::new(Semaphore::new(1)),
        };
        self.slots.insert(id, slot);
    }

    /// Load a detector or generator checkpoint; the kind is read from it.
    pub fn load(&mut self, id: &str, path: impl AsRef<Path>) -> patho_core::Result<()> {
        let ckpt = ModelCheckpoint::load(path.as_ref())?;
        match ckpt.kind {
            ModelKind::Detector => self.insert_detector(id, Detector::from_checkpoint(&ckpt)?),
            ModelKind::Generator => {
                self.insert_generator(id, Generator::from_checkpoint(&ckpt)?);
                Ok(())
            }
            other => Err(patho_core::Error::Config(format!(
                "{} is a {other} checkpoint; the service serves detectors and generators",
                path.as_ref().display()
            ))),
        }
    }

    /// Seeded, untrained 64 x 64 models `detector-demo` and `generator-demo`
    /// for contract tests and UI development.
    pub fn demo(seed: u64) -> patho_core::Result<Self> {
        let mut r = Self::new();
        let detector = Detector::new(DetectorConfig::desk_64(), seed)?;
        let generator = Generator::new(GeneratorConfig::desk_64().with_detector_taps(&detector), seed.wrapping_add(1))?;
        r.insert_detector("detector-demo", detector)?;
        r.insert_generator("generator-demo", generator);
        Ok(r)
    }

    pub fn infos(&self) -> Vec<ModelInfo> {
        self.slots.values().map(|s| s.info.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Run `f` on model `id` on the blocking pool once its permit is free.
    pub async fn run<R, F>(&self, id: &str, kind: ModelKind, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&LoadedModel) -> patho_core::Result<R> + Send + 'static,
    {
        let slot = self
            .slots
            .get(id)
            .ok_or_else(|| ApiError::model_not_loaded(format!("no model `{id}` is loaded")))?;
        if slot.info.kind != kind {
            return Err(ApiError::model_not_loaded(format!(
                "model `{id}` is a {}, not a {kind}",
                slot.info.kind
            )));
        }
        let permit = slot.gate.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let model = slot.model.clone();
        let out = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            f(&model)
        })
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?;
        out.map_err(ApiError::from)
    }
}
