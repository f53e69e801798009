//! HTTP front end for the forget gate.
//!
//! Routes: `POST /v1/forget`, `POST /v1/query`, `GET /v1/stats`,
//! `POST /v1/threshold`, `POST /v1/compress`, `GET /healthz`.

pub mod persist;
pub mod remote;
pub mod server;

pub use remote::{HttpSurrogate, HttpUpstream, RemoteEmbedder};
pub use server::{build_pipeline, build_pipeline_with, ApiError, Gateway, RunningGateway};
