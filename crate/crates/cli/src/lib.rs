//! Serving and command-line plumbing around `etr-core`: the framed JSON
//! protocol, model backends, the gateway, and the pipeline commands.

pub mod commands;
pub mod config;
pub mod gateway;
pub mod remote;
pub mod server;
pub mod throttle;
pub mod wire;

pub use config::{BackendDescriptor, BackendKind, GatewayConfig};
pub use gateway::Gateway;
pub use remote::RemoteModel;
pub use server::{Handler, ModelHandler, Server};
