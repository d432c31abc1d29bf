//! The single generate endpoint over a meta backend and expert backends.

use std::path::Path;
use std::sync::Arc;

use etr_core::{EtrError, ExpertTokenHead, Framework, LanguageModel, Limits, Result};
use log::info;
use serde_json::{json, Value};

use crate::config::GatewayConfig;
use crate::server::Handler;
use crate::throttle::Throttled;
use crate::wire::{field, PROTOCOL_VERSION};

pub struct Gateway {
    framework: Framework,
    limits: Limits,
}

impl Gateway {
    pub fn new(framework: Framework, limits: Limits) -> Self {
        Gateway { framework, limits }
    }

    /// Opens every backend, loads the head and checks that they agree.
    /// Relative paths resolve against `base`.
    pub fn from_config(cfg: &GatewayConfig, base: &Path) -> Result<Self> {
        cfg.validate()?;
        let throttle = |m: Arc<dyn LanguageModel>| -> Arc<dyn LanguageModel> {
            Arc::new(Throttled::new(m, cfg.max_inflight_per_backend))
        };
        let meta = throttle(cfg.meta.open(base, cfg.timeout())?);
        let head = ExpertTokenHead::load(base.join(&cfg.head))?;
        if head.len() != cfg.experts.len() {
            return Err(EtrError::config(format!(
                "head has {} expert rows but {} expert backends are configured",
                head.len(),
                cfg.experts.len()
            )));
        }
        let mut experts = Vec::with_capacity(cfg.experts.len());
        for (row, d) in head.experts().iter().zip(&cfg.experts) {
            if row.name != d.name {
                return Err(EtrError::config(format!(
                    "expert order differs from the head: row {:?}, backend {:?}",
                    row.name, d.name
                )));
            }
            experts.push(throttle(d.open(base, cfg.timeout())?));
        }
        info!("gateway ready: meta {}, {} experts", meta.name(), experts.len());
        Ok(Gateway::new(Framework::new(meta, head, experts)?, cfg.limits))
    }

    pub fn framework(&self) -> &Framework {
        &self.framework
    }

    /// `{"response":…}`, plus `"trace"` only when asked for.
    pub fn chat(&self, query: &str, max_new_tokens: Option<usize>, trace: bool) -> Result<Value> {
        let limits = Limits {
            max_new_tokens: max_new_tokens.unwrap_or(self.limits.max_new_tokens),
            ..self.limits
        };
        let t = self.framework.generate(query, &limits)?;
        let mut out = json!({ "response": t.response });
        if trace {
            out["trace"] = serde_json::to_value(&t)?;
        }
        Ok(out)
    }
}

impl Handler for Gateway {
    fn handle(&self, method: &str, params: &Value) -> Result<Value> {
        match method {
            "describe" => Ok(json!({
                "protocol": PROTOCOL_VERSION,
                "name": "etr",
                "capabilities": {"hidden_state": false, "word_logits": false, "generate": false},
            })),
            "chat_generate" => {
                let max = match params.get("max_new_tokens") {
                    None | Some(Value::Null) => None,
                    Some(_) => Some(field::usize(params, "max_new_tokens")?),
                };
                self.chat(field::str(params, "query")?, max, field::bool_or(params, "trace", false)?)
            }
            other => Err(EtrError::protocol("method", format!("unknown method {other:?}"))),
        }
    }
}
