//! HTTP/JSON front end over the core library: descriptor extraction,
//! descriptor-conditioned generation, severity scoring and descriptor
//! edits. Schemas live in `patho_core::api`.

pub mod error;
pub mod registry;
pub mod routes;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use registry::{LoadedModel, ModelRegistry};
pub use routes::{router, AppState};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Service config (TOML). Model paths resolve against the config's directory.
///
/// ```toml
/// bind = "127.0.0.1:8080"
/// demo = false
///
/// [[models]]
/// id = "detector"
/// path = "runs/detector.safetensors"
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    /// Also register the seeded demo models.
    #[serde(default)]
    pub demo: bool,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
}

fn default_bind() -> SocketAddr {
    "127.0.0.1:8080".parse().expect("valid literal")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            demo: false,
            models: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> patho_core::Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| patho_core::Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            m.path = base.join(&m.path);
        }
        Ok(cfg)
    }

    pub fn build_registry(&self) -> patho_core::Result<ModelRegistry> {
        let mut registry = if self.demo { ModelRegistry::demo(0)? } else { ModelRegistry::new() };
        for m in &self.models {
            registry.load(&m.id, &m.path)?;
            log::info!("loaded model `{}` from {}", m.id, m.path.display());
        }
        Ok(registry)
    }
}

/// Serve until ctrl-c.
pub async fn serve(listener: TcpListener, registry: ModelRegistry) -> std::io::Result<()> {
    let app = router(AppState {
        registry: Arc::new(registry),
    });
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
