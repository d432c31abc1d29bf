//! Client handle for a model served over the framed protocol.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use etr_core::lm::{Capabilities, Generation, Prompt, StopReason};
use etr_core::vocab::Controls;
use etr_core::{EtrError, LanguageModel, Result, Vocabulary};
use serde_json::{json, Value};

use crate::wire::{field, read_frame, write_frame, Request, Response, PROTOCOL_VERSION};

pub struct RemoteModel {
    name: String,
    address: String,
    timeout: Duration,
    capabilities: Capabilities,
    hidden_dim: Option<usize>,
    fingerprint: Option<String>,
    vocab: Option<Vocabulary>,
    pool: Mutex<Vec<TcpStream>>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for RemoteModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteModel")
            .field("name", &self.name)
            .field("address", &self.address)
            .finish()
    }
}

impl RemoteModel {
    /// Connects and asks the backend to describe itself. `name` overrides
    /// the name the backend reports. `declared`, when given, narrows the
    /// usable capabilities to those also declared locally.
    pub fn connect(
        address: &str,
        name: Option<&str>,
        declared: Option<Capabilities>,
        timeout: Duration,
    ) -> Result<Self> {
        let mut m = RemoteModel {
            name: name.unwrap_or(address).to_string(),
            address: address.to_string(),
            timeout,
            capabilities: Capabilities::GENERATE_ONLY,
            hidden_dim: None,
            fingerprint: None,
            vocab: None,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        };
        let d = m.call("describe", json!({}))?;
        let protocol = field::usize(&d, "protocol")?;
        if protocol != PROTOCOL_VERSION as usize {
            return Err(EtrError::protocol(
                "protocol",
                format!("backend speaks version {protocol}, client speaks {PROTOCOL_VERSION}"),
            ));
        }
        if name.is_none() {
            m.name = field::str(&d, "name")?.to_string();
        }
        let caps: Capabilities = serde_json::from_value(field::get(&d, "capabilities")?.clone())
            .map_err(|e| EtrError::protocol("capabilities", e.to_string()))?;
        m.capabilities = match declared {
            Some(c) => Capabilities {
                hidden_state: c.hidden_state && caps.hidden_state,
                word_logits: c.word_logits && caps.word_logits,
                generate: c.generate && caps.generate,
            },
            None => caps,
        };
        m.hidden_dim = match d.get("hidden_dim") {
            None | Some(Value::Null) => None,
            Some(_) => Some(field::usize(&d, "hidden_dim")?),
        };
        m.fingerprint = field::opt_str(&d, "fingerprint")?.map(str::to_string);
        m.vocab = match d.get("vocab") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let controls: Controls = serde_json::from_value(field::get(v, "controls")?.clone())
                    .map_err(|e| EtrError::protocol("controls", e.to_string()))?;
                Some(Vocabulary::new(field::str(v, "chars")?, controls)?)
            }
        };
        if m.capabilities.hidden_state && m.hidden_dim.is_none() {
            return Err(EtrError::protocol("hidden_dim", "required with hidden_state"));
        }
        if m.capabilities.word_logits && m.vocab.is_none() {
            return Err(EtrError::protocol("vocab", "required with word_logits"));
        }
        Ok(m)
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    fn open(&self) -> Result<TcpStream> {
        let mut last = None;
        for addr in self.address.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout))?;
                    s.set_write_timeout(Some(self.timeout))?;
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(EtrError::Backend {
            backend: self.name.clone(),
            step: 0,
            message: match last {
                Some(e) => format!("unreachable at {}: {e}", self.address),
                None => format!("no address resolved for {}", self.address),
            },
        })
    }

    /// Sends one request and returns its `result`.
    pub fn call(&self, method: &str, params: Value) -> Result<Value> {
        let pooled = self.pool.lock().unwrap().pop();
        let mut stream = match pooled {
            Some(s) => s,
            None => self.open()?,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = Request {
            v: PROTOCOL_VERSION,
            id,
            method: method.to_string(),
            params,
        };
        let io_err = |e: EtrError| EtrError::Backend {
            backend: self.name.clone(),
            step: 0,
            message: e.to_string(),
        };
        write_frame(&mut stream, &req).map_err(io_err)?;
        let frame = read_frame(&mut stream)
            .map_err(io_err)?
            .ok_or_else(|| io_err(EtrError::format("connection closed")))?;
        let resp: Response =
            serde_json::from_value(frame).map_err(|e| EtrError::protocol("response", e.to_string()))?;
        if resp.id != id {
            return Err(EtrError::protocol("id", format!("expected {id}, got {}", resp.id)));
        }
        self.pool.lock().unwrap().push(stream);
        match (resp.result, resp.error) {
            (_, Some(e)) if e.kind == "protocol" => Err(EtrError::protocol(method, e.message)),
            (_, Some(e)) => Err(EtrError::Backend {
                backend: self.name.clone(),
                step: 0,
                message: e.message,
            }),
            (Some(r), None) => Ok(r),
            (None, None) => Err(EtrError::protocol("result", "missing")),
        }
    }

    fn require(&self, has: bool, capability: &'static str) -> Result<()> {
        if has {
            Ok(())
        } else {
            Err(EtrError::MissingCapability {
                backend: self.name.clone(),
                capability,
            })
        }
    }
}

fn prompt_params(p: &Prompt) -> Value {
    json!({ "query": p.query, "generated": p.generated })
}

impl LanguageModel for RemoteModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }

    fn hidden_dim(&self) -> Option<usize> {
        self.hidden_dim
    }

    fn fingerprint(&self) -> Option<String> {
        self.fingerprint.clone()
    }

    fn hidden_state(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.require(self.capabilities.hidden_state, "hidden_state")?;
        let r = self.call("hidden_state", prompt_params(prompt))?;
        field::floats(&r, "h", self.hidden_dim.unwrap_or(0))
    }

    fn word_logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.require(self.capabilities.word_logits, "word_logits")?;
        let r = self.call("word_logits", prompt_params(prompt))?;
        field::floats(&r, "logits", self.vocab.as_ref().map_or(0, Vocabulary::size))
    }

    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        self.require(self.capabilities.generate, "generate")?;
        let mut params = prompt_params(prompt);
        params["max_new_tokens"] = json!(max_new_tokens);
        let r = self.call("generate", params)?;
        let text = field::str(&r, "text")?.to_string();
        if text.chars().count() > max_new_tokens {
            return Err(EtrError::protocol("text", "longer than max_new_tokens"));
        }
        let stop: StopReason = serde_json::from_value(field::get(&r, "stop")?.clone())
            .map_err(|e| EtrError::protocol("stop", e.to_string()))?;
        Ok(Generation { text, stop })
    }
}
