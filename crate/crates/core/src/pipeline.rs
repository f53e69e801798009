//! The in-process request path shared by the HTTP gateway and offline
//! evaluation: embed, retrieve, decide, and either refuse or forward.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::gate::{decide, validate_threshold, Action, RefusalSet};
use crate::store::{CompressionReport, ForgetStore, Retrieval, StoreMode};
use crate::Embedding;

/// Text generation by the served model. The gateway holds nothing else, so it
/// has no way to alter the model.
pub trait Upstream: Send + Sync {
    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String>;
}

/// In-process upstream for tests and offline runs; counts invocations.
pub struct MockUpstream {
    respond: Box<dyn Fn(&str) -> Result<String> + Send + Sync>,
    calls: AtomicUsize,
}

impl MockUpstream {
    pub fn new(respond: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self { respond: Box::new(respond), calls: AtomicUsize::new(0) }
    }

    pub fn canned(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Answers with the prompt itself; handy for checking pass-through.
    pub fn echo() -> Self {
        Self::new(|p| Ok(p.to_string()))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Upstream for MockUpstream {
    fn generate(&self, prompt: &str, _max_tokens: u32) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(prompt)
    }
}

impl<U: Upstream + ?Sized> Upstream for Arc<U> {
    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String> {
        (**self).generate(prompt, max_tokens)
    }
}

const LATENCY_WINDOW: usize = 8192;

/// Sliding window of recent latencies (milliseconds).
#[derive(Debug, Default)]
pub struct LatencyRecorder {
    window: Mutex<VecDeque<f64>>,
    total: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Quantiles {
    pub count: u64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyRecorder {
    pub fn record(&self, ms: f64) {
        let mut w = self.window.lock().expect("latency lock");
        if w.len() == LATENCY_WINDOW {
            w.pop_front();
        }
        w.push_back(ms);
        self.total.fetch_add(1, Ordering::Relaxed);
    }

    /// Nearest-rank quantiles over the window.
    pub fn quantiles(&self) -> Quantiles {
        let mut v: Vec<f64> = self.window.lock().expect("latency lock").iter().copied().collect();
        if v.is_empty() {
            return Quantiles::default();
        }
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Quantiles {
            count: self.total.load(Ordering::Relaxed),
            p50: rank(0.50),
            p95: rank(0.95),
            p99: rank(0.99),
            max: *v.last().expect("non-empty"),
        }
    }
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgetAck {
    pub id: String,
    pub latency_ms: f64,
    pub embed_ms: f64,
    pub store_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub action: Action,
    pub response: String,
    pub s_max: Option<f64>,
    pub matched_id: Option<String>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub count: usize,
    pub store_mode: StoreMode,
    pub dim: Option<usize>,
    pub delta: f64,
    pub uptime_s: f64,
    pub answers: u64,
    pub refusals: u64,
    pub upstream_calls: u64,
    pub forget_latency_ms: Quantiles,
    pub query_latency_ms: Quantiles,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub threshold: f64,
    pub rng_seed: u64,
    pub max_tokens: u32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { threshold: crate::gate::DEFAULT_THRESHOLD, rng_seed: 0, max_tokens: 256 }
    }
}

pub struct Pipeline {
    embedder: Arc<dyn Embedder>,
    store: Arc<ForgetStore>,
    upstream: Arc<dyn Upstream>,
    refusals: RefusalSet,
    threshold_bits: AtomicU64,
    rng_seed: u64,
    max_tokens: u32,
    requests: AtomicU64,
    answers: AtomicU64,
    refused: AtomicU64,
    upstream_calls: AtomicU64,
    forget_latency: LatencyRecorder,
    query_latency: LatencyRecorder,
    started: Instant,
}

impl Pipeline {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        store: Arc<ForgetStore>,
        upstream: Arc<dyn Upstream>,
        refusals: RefusalSet,
        options: PipelineOptions,
    ) -> Result<Self> {
        validate_threshold(options.threshold)?;
        if let Some(dim) = store.dim() {
            if dim != embedder.dim() {
                return Err(Error::DimensionMismatch { expected: dim, got: embedder.dim() });
            }
        }
        Ok(Self {
            embedder,
            store,
            upstream,
            refusals,
            threshold_bits: AtomicU64::new(options.threshold.to_bits()),
            rng_seed: options.rng_seed,
            max_tokens: options.max_tokens,
            requests: AtomicU64::new(0),
            answers: AtomicU64::new(0),
            refused: AtomicU64::new(0),
            upstream_calls: AtomicU64::new(0),
            forget_latency: LatencyRecorder::default(),
            query_latency: LatencyRecorder::default(),
            started: Instant::now(),
        })
    }

    pub fn store(&self) -> &Arc<ForgetStore> {
        &self.store
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn refusals(&self) -> &RefusalSet {
        &self.refusals
    }

    pub fn threshold(&self) -> f64 {
        f64::from_bits(self.threshold_bits.load(Ordering::SeqCst))
    }

    /// Atomically replace the threshold; returns `(previous, current)`.
    pub fn set_threshold(&self, delta: f64) -> Result<(f64, f64)> {
        validate_threshold(delta)?;
        let prev = f64::from_bits(self.threshold_bits.swap(delta.to_bits(), Ordering::SeqCst));
        Ok((prev, delta))
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let e = self.embedder.embed(text).map_err(|e| match e {
            Error::EmbedderFailure(m) => Error::EmbedderFailure(m),
            other => Error::EmbedderFailure(other.to_string()),
        })?;
        if e.dim() != self.embedder.dim() {
            return Err(Error::EmbedderFailure(format!(
                "embedder returned dimension {}, expected {}",
                e.dim(),
                self.embedder.dim()
            )));
        }
        Ok(e)
    }

    /// Embed and append a forget request. Returns once the record is visible
    /// to every retrieval that starts afterwards.
    pub fn forget(&self, text: &str) -> Result<ForgetAck> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let t0 = Instant::now();
        let emb = self.embed(text)?;
        let embed_ms = elapsed_ms(t0);
        let t1 = Instant::now();
        let rec = self.store.add(text, &emb)?;
        let store_ms = elapsed_ms(t1);
        let latency_ms = elapsed_ms(t0);
        self.forget_latency.record(latency_ms);
        Ok(ForgetAck { id: rec.id, latency_ms, embed_ms, store_ms })
    }

    /// Retrieval only: best forget-store match for `prompt`.
    pub fn score(&self, prompt: &str) -> Result<Retrieval> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let emb = self.embed(prompt)?;
        self.store.max_similarity(&emb)
    }

    /// Full query path. The upstream is contacted only on `Answer`.
    pub fn query(&self, prompt: &str) -> Result<QueryOutcome> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let t0 = Instant::now();
        let threshold = self.threshold();
        let request = self.requests.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(request);

        let emb = self.embed(prompt)?;
        let snapshot = self.store.snapshot();
        let decision = decide(&emb, &snapshot, threshold, &self.refusals, &mut rng)?;
        let response = match decision.action {
            Action::Refuse => {
                self.refused.fetch_add(1, Ordering::Relaxed);
                decision.refusal_text.clone().expect("refusal text on refuse")
            }
            Action::Answer => {
                self.answers.fetch_add(1, Ordering::Relaxed);
                self.upstream_calls.fetch_add(1, Ordering::Relaxed);
                self.upstream.generate(prompt, self.max_tokens)?
            }
        };
        let latency_ms = elapsed_ms(t0);
        self.query_latency.record(latency_ms);
        Ok(QueryOutcome {
            action: decision.action,
            response,
            s_max: decision.s_max,
            matched_id: decision.matched_id,
            latency_ms,
        })
    }

    pub fn compress(&self, mode: StoreMode, seed: u64) -> Result<CompressionReport> {
        self.store.compress(mode, seed)
    }

    pub fn stats(&self) -> StatsReport {
        let snap = self.store.snapshot();
        StatsReport {
            count: snap.len(),
            store_mode: snap.mode(),
            dim: snap.dim(),
            delta: self.threshold(),
            uptime_s: self.started.elapsed().as_secs_f64(),
            answers: self.answers.load(Ordering::Relaxed),
            refusals: self.refused.load(Ordering::Relaxed),
            upstream_calls: self.upstream_calls.load(Ordering::Relaxed),
            forget_latency_ms: self.forget_latency.quantiles(),
            query_latency_ms: self.query_latency.quantiles(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::StubEmbedder;

    fn pipeline(upstream: Arc<MockUpstream>) -> Pipeline {
        Pipeline::new(
            Arc::new(StubEmbedder::new(128)),
            Arc::new(ForgetStore::new()),
            upstream,
            RefusalSet::builtin(),
            PipelineOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn empty_store_always_answers() {
        let up = Arc::new(MockUpstream::canned("42"));
        let p = pipeline(up.clone());
        let out = p.query("what is six times seven").unwrap();
        assert_eq!(out.action, Action::Answer);
        assert_eq!(out.response, "42");
        assert_eq!(out.s_max, None);
        assert_eq!(up.calls(), 1);
    }

    #[test]
    fn forgotten_text_is_refused_without_upstream() {
        let up = Arc::new(MockUpstream::canned("42"));
        let p = pipeline(up.clone());
        p.forget("Where does Alice Example live?").unwrap();
        p.set_threshold(1.0).unwrap();
        let out = p.query("Where does Alice Example live?").unwrap();
        assert_eq!(out.action, Action::Refuse);
        assert!(p.refusals().phrases().contains(&out.response));
        assert_eq!(up.calls(), 0);
        let unrelated = p.query("how many legs does a spider have").unwrap();
        assert_eq!(unrelated.action, Action::Answer);
        assert_eq!(up.calls(), 1);
        assert_eq!(p.stats().upstream_calls, 1);
    }

    #[test]
    fn input_validation() {
        let p = pipeline(Arc::new(MockUpstream::echo()));
        assert!(matches!(p.forget("   "), Err(Error::EmptyText)));
        assert!(matches!(p.query(""), Err(Error::EmptyText)));
        assert!(matches!(p.set_threshold(1.01), Err(Error::InvalidThreshold(_))));
        assert_eq!(p.set_threshold(0.9).unwrap(), (0.8, 0.9));
    }

    #[test]
    fn stats_track_counts_and_quantiles() {
        let p = pipeline(Arc::new(MockUpstream::echo()));
        assert_eq!(p.stats().count, 0);
        for t in ["a b", "c d", "e f"] {
            p.forget(t).unwrap();
        }
        for _ in 0..20 {
            p.query("x y").unwrap();
        }
        let s = p.stats();
        assert_eq!(s.count, 3);
        assert_eq!(s.forget_latency_ms.count, 3);
        let q = s.query_latency_ms;
        assert!(q.p50 <= q.p95 && q.p95 <= q.p99 && q.p99 <= q.max);
    }

    #[test]
    fn upstream_errors_propagate() {
        let up = Arc::new(MockUpstream::new(|_| Err(Error::UpstreamTimeout)));
        let p = pipeline(up);
        assert!(matches!(p.query("anything"), Err(Error::UpstreamTimeout)));
    }
}
