use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forgetgate::embed::{ComposedEmbedder, Embedder, StubEmbedder};
use forgetgate::gate::RefusalSet;
use forgetgate::io::{load_head, load_store, EmbedderKind, ServiceConfig, UpstreamKind};
use forgetgate::pipeline::{MockUpstream, Pipeline, PipelineOptions, Upstream};
use forgetgate::{Error, ForgetStore, StoreMode, StoreVariant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Semaphore};
use tokio::task::JoinHandle;

use crate::persist::Persister;
use crate::remote::{HttpUpstream, RemoteEmbedder};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyText
            | Error::InvalidThreshold(_)
            | Error::Validation(_)
            | Error::InvalidVector
            | Error::Json(_)
            | Error::Format(_) => StatusCode::BAD_REQUEST,
            Error::EmbedderFailure(_) | Error::DimensionMismatch { .. } | Error::ZeroNormVector => {
                StatusCode::BAD_GATEWAY
            }
            Error::UpstreamFailure(_) => StatusCode::BAD_GATEWAY,
            Error::UpstreamTimeout => StatusCode::GATEWAY_TIMEOUT,
            Error::StoreFull(_) => StatusCode::INSUFFICIENT_STORAGE,
            Error::InsufficientData(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::warn!(status = %self.status, "{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    permits: Arc<Semaphore>,
    persister: Option<Arc<Persister>>,
}

impl AppState {
    /// Run blocking pipeline work off the async executor, bounded by the
    /// in-flight cap.
    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Pipeline) -> forgetgate::Result<T> + Send + 'static,
    {
        let _permit = self
            .permits
            .clone()
            .try_acquire_owned()
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "too many requests in flight"))?;
        let pipeline = self.pipeline.clone();
        tokio::task::spawn_blocking(move || f(&pipeline))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
            .map_err(ApiError::from)
    }

    fn mark_dirty(&self) {
        if let Some(p) = &self.persister {
            p.mark_dirty();
        }
    }
}

#[derive(Deserialize)]
struct ForgetRequest {
    text: String,
}

#[derive(Deserialize)]
struct QueryRequest {
    prompt: String,
}

#[derive(Deserialize)]
struct ThresholdRequest {
    delta: f64,
}

#[derive(Serialize)]
struct ThresholdResponse {
    previous: f64,
    current: f64,
}

#[derive(Deserialize)]
struct CompressRequest {
    mode: StoreVariant,
    #[serde(default = "default_pca_dim")]
    pca_dim: usize,
    #[serde(default = "default_keep_ratio")]
    keep_ratio: f64,
    #[serde(default)]
    seed: u64,
}

fn default_pca_dim() -> usize {
    32
}

fn default_keep_ratio() -> f64 {
    0.9
}

async fn forget(State(state): State<AppState>, body: Bytes) -> ApiResult<forgetgate::pipeline::ForgetAck> {
    let req: ForgetRequest = parse_body(&body)?;
    let ack = state.run(move |p| p.forget(&req.text)).await?;
    state.mark_dirty();
    Ok(Json(ack))
}

async fn query(State(state): State<AppState>, body: Bytes) -> ApiResult<forgetgate::pipeline::QueryOutcome> {
    let req: QueryRequest = parse_body(&body)?;
    Ok(Json(state.run(move |p| p.query(&req.prompt)).await?))
}

async fn stats(State(state): State<AppState>) -> Json<forgetgate::pipeline::StatsReport> {
    Json(state.pipeline.stats())
}

async fn threshold(State(state): State<AppState>, body: Bytes) -> ApiResult<ThresholdResponse> {
    let req: ThresholdRequest = parse_body(&body)?;
    let (previous, current) = state.pipeline.set_threshold(req.delta)?;
    tracing::info!(previous, current, "threshold changed");
    Ok(Json(ThresholdResponse { previous, current }))
}

async fn compress(State(state): State<AppState>, body: Bytes) -> ApiResult<forgetgate::store::CompressionReport> {
    let req: CompressRequest = parse_body(&body)?;
    let mode = match req.mode {
        StoreVariant::Exact => StoreMode::exact(),
        StoreVariant::Compressed => StoreMode::compressed(req.pca_dim),
        StoreVariant::Clustered => StoreMode::clustered(req.pca_dim, req.keep_ratio),
    };
    // maintenance work; does not count against the request cap
    let pipeline = state.pipeline.clone();
    let report = tokio::task::spawn_blocking(move || pipeline.compress(mode, req.seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    state.mark_dirty();
    Ok(Json(report))
}

async fn health() -> &'static str {
    "ok"
}

/// Assemble the embedder, store, upstream and refusal set described by `cfg`.
pub fn build_pipeline(cfg: &ServiceConfig) -> forgetgate::Result<Pipeline> {
    let upstream: Arc<dyn Upstream> = match cfg.upstream {
        UpstreamKind::Mock => Arc::new(MockUpstream::canned(cfg.mock_response.clone())),
        UpstreamKind::Http => Arc::new(HttpUpstream::new(
            cfg.upstream_url.clone().expect("validated"),
            Duration::from_millis(cfg.upstream_timeout_ms),
        )),
    };
    build_pipeline_with(cfg, upstream)
}

pub fn build_pipeline_with(cfg: &ServiceConfig, upstream: Arc<dyn Upstream>) -> forgetgate::Result<Pipeline> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let base: Arc<dyn Embedder> = match cfg.embedder {
        EmbedderKind::Stub => Arc::new(StubEmbedder::new(cfg.embedder_dim)),
        EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(
            cfg.embedder_url.clone().expect("validated"),
            cfg.embedder_dim,
            Duration::from_millis(cfg.embedder_timeout_ms),
        )),
    };
    let embedder: Arc<dyn Embedder> = match &cfg.head_path {
        Some(path) => Arc::new(ComposedEmbedder::new(base, load_head(path)?)?),
        None => base,
    };
    let store = match &cfg.store_path {
        Some(path) if path.exists() => {
            let snap = load_store(path)?;
            tracing::info!(records = snap.len(), path = %path.display(), "store loaded");
            ForgetStore::from_snapshot(snap, cfg.store_capacity)
        }
        _ => ForgetStore::with_capacity(cfg.store_capacity),
    };
    apply_store_mode(cfg, &store)?;
    let refusals = match &cfg.refusal_file {
        Some(path) => RefusalSet::load(path)?,
        None => RefusalSet::builtin(),
    };
    Pipeline::new(
        embedder,
        Arc::new(store),
        upstream,
        refusals,
        PipelineOptions { threshold: cfg.threshold, rng_seed: cfg.rng_seed, max_tokens: cfg.max_tokens },
    )
}

/// Compress an exact store at startup when the config asks for a reduced
/// mode. Compression is one-shot, so a store that is already reduced is left
/// as it is, and one too small to fit the projection stays exact until an
/// explicit `/v1/compress`.
fn apply_store_mode(cfg: &ServiceConfig, store: &ForgetStore) -> forgetgate::Result<()> {
    let mode = match cfg.store_mode {
        StoreVariant::Exact => return Ok(()),
        StoreVariant::Compressed => StoreMode::compressed(cfg.pca_dim),
        StoreVariant::Clustered => StoreMode::clustered(cfg.pca_dim, cfg.keep_ratio),
    };
    let current = store.mode().variant;
    if current != StoreVariant::Exact {
        if current != cfg.store_mode {
            tracing::warn!(?current, wanted = ?cfg.store_mode, "store already compressed; keeping its mode");
        }
        return Ok(());
    }
    match store.compress(mode, cfg.rng_seed) {
        Ok(report) => {
            tracing::info!(ratio = report.ratio, "store compressed at startup");
            Ok(())
        }
        Err(Error::InsufficientData(msg)) => {
            tracing::warn!("store left exact: {msg}");
            Ok(())
        }
        Err(e) => Err(e),
    }
}

pub struct Gateway {
    pipeline: Arc<Pipeline>,
    max_in_flight: usize,
    persist: Option<(PathBuf, Duration)>,
}

impl Gateway {
    pub fn new(pipeline: Arc<Pipeline>, max_in_flight: usize) -> Self {
        Self { pipeline, max_in_flight: max_in_flight.max(1), persist: None }
    }

    pub fn from_config(cfg: &ServiceConfig) -> forgetgate::Result<Self> {
        let gw = Self::new(Arc::new(build_pipeline(cfg)?), cfg.max_in_flight);
        Ok(match &cfg.store_path {
            Some(p) => gw.with_persistence(p.clone(), Duration::from_millis(cfg.persist_interval_ms)),
            None => gw,
        })
    }

    /// Write the store to `path` in the background after forgets and
    /// compressions, and once more on shutdown.
    pub fn with_persistence(mut self, path: PathBuf, interval: Duration) -> Self {
        self.persist = Some((path, interval));
        self
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    fn state(&self) -> AppState {
        let persister = self
            .persist
            .as_ref()
            .map(|(path, interval)| Arc::new(Persister::spawn(self.pipeline.store().clone(), path.clone(), *interval)));
        AppState { pipeline: self.pipeline.clone(), permits: Arc::new(Semaphore::new(self.max_in_flight)), persister }
    }

    fn router_with(state: AppState) -> Router {
        Router::new()
            .route("/v1/forget", post(forget))
            .route("/v1/query", post(query))
            .route("/v1/stats", get(stats))
            .route("/v1/threshold", post(threshold))
            .route("/v1/compress", post(compress))
            .route("/healthz", get(health))
            .with_state(state)
    }

    /// Serve on `listener` until `shutdown` resolves, then flush the store.
    pub async fn serve(self, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let state = self.state();
        let persister = state.persister.clone();
        let app = Self::router_with(state);
        tracing::info!(addr = %listener.local_addr()?, "gateway listening");
        axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
        if let Some(p) = persister {
            p.flush().map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        Ok(())
    }

    /// Bind `addr` and serve on the current runtime; used by tests and
    /// embedding applications.
    pub async fn spawn(self, addr: &str) -> std::io::Result<RunningGateway> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(self.serve(listener, async {
            let _ = rx.await;
        }));
        Ok(RunningGateway { addr: local_addr, shutdown: Some(tx), handle })
    }
}

pub struct RunningGateway {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl RunningGateway {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.handle.await.map_err(std::io::Error::other)?
    }
}
