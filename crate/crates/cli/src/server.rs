//! A threaded TCP server speaking the framed protocol, and the handler that
//! exposes one language model through it.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use etr_core::lm::Prompt;
use etr_core::{EtrError, LanguageModel, Result};
use log::{debug, warn};
use serde_json::{json, Value};

use crate::wire::{field, read_frame, write_frame, Request, Response, PROTOCOL_VERSION};

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, method: &str, params: &Value) -> Result<Value>;
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `listen` and serves each connection on its own thread.
    pub fn start(listen: &str, handler: Arc<dyn Handler>) -> Result<Server> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(s) => {
                        let h = handler.clone();
                        std::thread::spawn(move || serve_connection(s, h.as_ref()));
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        });
        Ok(Server {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(t) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, handler: &dyn Handler) {
    let _ = stream.set_nodelay(true);
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                debug!("dropping connection: {e}");
                let _ = write_frame(&mut stream, &Response::err(0, &e));
                return;
            }
        };
        let id = frame.get("id").and_then(Value::as_u64).unwrap_or(0);
        let resp = match serde_json::from_value::<Request>(frame) {
            Err(e) => Response::err(id, &EtrError::protocol("request", e.to_string())),
            Ok(req) if req.v != PROTOCOL_VERSION => Response::err(
                id,
                &EtrError::protocol("v", format!("unsupported protocol version {}", req.v)),
            ),
            Ok(req) => match handler.handle(&req.method, &req.params) {
                Ok(v) => Response::ok(id, v),
                Err(e) => Response::err(id, &e),
            },
        };
        if write_frame(&mut stream, &resp).is_err() {
            return;
        }
    }
}

pub fn prompt_of(params: &Value) -> Result<Prompt> {
    Ok(Prompt::with_generated(
        field::str(params, "query")?,
        field::opt_str(params, "generated")?.unwrap_or(""),
    ))
}

/// Serves one model: `describe`, `hidden_state`, `word_logits`, `generate`
/// and `chat_generate`.
pub struct ModelHandler {
    model: Arc<dyn LanguageModel>,
}

impl ModelHandler {
    pub fn new(model: Arc<dyn LanguageModel>) -> Self {
        ModelHandler { model }
    }
}

impl Handler for ModelHandler {
    fn handle(&self, method: &str, params: &Value) -> Result<Value> {
        let m = self.model.as_ref();
        match method {
            "describe" => Ok(json!({
                "protocol": PROTOCOL_VERSION,
                "name": m.name(),
                "capabilities": m.capabilities(),
                "hidden_dim": m.hidden_dim(),
                "fingerprint": m.fingerprint(),
                "vocab": m.vocabulary().map(|v| json!({
                    "chars": v.chars().iter().collect::<String>(),
                    "controls": v.controls(),
                })),
            })),
            "hidden_state" => Ok(json!({ "h": m.hidden_state(&prompt_of(params)?)? })),
            "word_logits" => Ok(json!({ "logits": m.word_logits(&prompt_of(params)?)? })),
            "generate" => {
                let g = m.generate(&prompt_of(params)?, field::usize(params, "max_new_tokens")?)?;
                Ok(json!({ "text": g.text, "stop": g.stop }))
            }
            "chat_generate" => {
                let max = match params.get("max_new_tokens") {
                    None | Some(Value::Null) => etr_core::Limits::default().max_new_tokens,
                    Some(_) => field::usize(params, "max_new_tokens")?,
                };
                let g = m.generate(&Prompt::new(field::str(params, "query")?), max)?;
                Ok(json!({ "response": g.text }))
            }
            other => Err(EtrError::protocol("method", format!("unknown method {other:?}"))),
        }
    }
}
