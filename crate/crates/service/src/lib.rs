//! HTTP service and batch CLI over `netcomb-core`.
//!
//! Responses are wrapped in [`api::ApiEnvelope`]. Binary RE-grid payloads
//! are stored by key and fetched from `/v1/datasets/{key}`.

pub mod api;
pub mod app;
pub mod cli;

pub use app::{router, serve, spawn, AppState, ServiceConfig};
