//! Backend and gateway configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use etr_core::lm::Capabilities;
use etr_core::{Backbone, EtrError, LanguageModel, Limits, Result, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::remote::RemoteModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    InProcess { checkpoint: PathBuf },
    Remote { address: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
}

impl BackendDescriptor {
    pub fn in_process(name: impl Into<String>, checkpoint: impl Into<PathBuf>) -> Self {
        BackendDescriptor {
            name: name.into(),
            kind: BackendKind::InProcess {
                checkpoint: checkpoint.into(),
            },
            capabilities: None,
        }
    }

    pub fn remote(name: impl Into<String>, address: impl Into<String>) -> Self {
        BackendDescriptor {
            name: name.into(),
            kind: BackendKind::Remote {
                address: address.into(),
            },
            capabilities: None,
        }
    }

    /// Loads the checkpoint or connects to the remote; paths resolve
    /// against `base`.
    pub fn open(&self, base: &Path, timeout: Duration) -> Result<Arc<dyn LanguageModel>> {
        match &self.kind {
            BackendKind::InProcess { checkpoint } => {
                let path = base.join(checkpoint);
                let m = Backbone::load(self.name.as_str(), Vocabulary::printable_ascii(), &path)
                    .map_err(|e| EtrError::config(format!("backend {}: {}: {e}", self.name, path.display())))?;
                Ok(Arc::new(m))
            }
            BackendKind::Remote { address } => Ok(Arc::new(RemoteModel::connect(
                address,
                Some(&self.name),
                self.capabilities,
                timeout,
            )?)),
        }
    }
}

fn default_listen() -> String {
    "127.0.0.1:7070".into()
}

fn default_timeout() -> u64 {
    30_000
}

fn default_inflight() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub meta: BackendDescriptor,
    /// In head-row order.
    pub experts: Vec<BackendDescriptor>,
    pub head: PathBuf,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_ms: u64,
    /// Concurrent calls allowed per backend.
    #[serde(default = "default_inflight")]
    pub max_inflight_per_backend: usize,
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.request_timeout_ms == 0 {
            return Err(EtrError::config("request_timeout_ms must be positive"));
        }
        if self.max_inflight_per_backend == 0 {
            return Err(EtrError::config("max_inflight_per_backend must be positive"));
        }
        Ok(())
    }

    /// Reads the file, then applies `ETR_LISTEN` and `ETR_HEAD`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg: GatewayConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Ok(listen) = std::env::var("ETR_LISTEN") {
            cfg.listen = listen;
        }
        if let Ok(head) = std::env::var("ETR_HEAD") {
            cfg.head = head.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}
