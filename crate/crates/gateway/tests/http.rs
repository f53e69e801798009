use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use forgetgate::embed::StubEmbedder;
use forgetgate::gate::RefusalSet;
use forgetgate::io::{load_store, ServiceConfig, UpstreamKind};
use forgetgate::pipeline::{MockUpstream, Pipeline, PipelineOptions};
use forgetgate::ForgetStore;
use forgetgate_gateway::{build_pipeline, Gateway, RemoteEmbedder};
use serde_json::{json, Value};

fn client() -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_secs(10)).build()
}

/// POST and return (status, body) without treating 4xx/5xx as errors.
fn post_json(url: &str, body: Value) -> (u16, Value) {
    match client().post(url).send_json(body) {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap_or(Value::Null)),
        Err(e) => panic!("{e}"),
    }
}

fn get_json(url: &str) -> Value {
    client().get(url).call().unwrap().into_json().unwrap()
}

fn mock_pipeline(upstream: Arc<MockUpstream>, capacity: Option<usize>) -> Arc<Pipeline> {
    Arc::new(
        Pipeline::new(
            Arc::new(StubEmbedder::new(128)),
            Arc::new(ForgetStore::with_capacity(capacity)),
            upstream,
            RefusalSet::builtin(),
            PipelineOptions::default(),
        )
        .unwrap(),
    )
}

/// Blocking client calls run on a separate thread so the server keeps running.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn forget_then_query_refuses_without_upstream() {
    let up = Arc::new(MockUpstream::canned("42"));
    let gw = Gateway::new(mock_pipeline(up.clone(), None), 64).spawn("127.0.0.1:0").await.unwrap();
    let base = gw.url();
    blocking(move || {
        let stats = get_json(&format!("{base}/v1/stats"));
        assert_eq!(stats["count"], 0);

        let (code, body) = post_json(&format!("{base}/v1/query"), json!({"prompt": "what is six times seven"}));
        assert_eq!(code, 200);
        assert_eq!(body["action"], "answer");
        assert_eq!(body["response"], "42");
        assert_eq!(body["s_max"], Value::Null);

        let (code, ack) = post_json(&format!("{base}/v1/forget"), json!({"text": "Where does Dana Doe live?"}));
        assert_eq!(code, 200);
        assert!(ack["id"].is_string() && ack["latency_ms"].as_f64().unwrap() >= 0.0);

        let (_, body) = post_json(&format!("{base}/v1/query"), json!({"prompt": "Where does Dana Doe live?"}));
        assert_eq!(body["action"], "refuse");
        assert_eq!(body["matched_id"], ack["id"]);
        assert!((body["s_max"].as_f64().unwrap() - 1.0).abs() < 1e-6);

        let stats = get_json(&format!("{base}/v1/stats"));
        assert_eq!(stats["count"], 1);
        assert_eq!(stats["upstream_calls"], 1);
        let q = &stats["query_latency_ms"];
        assert!(q["p50"].as_f64() <= q["p95"].as_f64() && q["p95"].as_f64() <= q["p99"].as_f64());
    })
    .await;
    assert_eq!(up.calls(), 1);
    gw.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn error_statuses() {
    let up = Arc::new(MockUpstream::new(|_| Err(forgetgate::Error::UpstreamTimeout)));
    let gw = Gateway::new(mock_pipeline(up, Some(1)), 64).spawn("127.0.0.1:0").await.unwrap();
    let base = gw.url();
    blocking(move || {
        assert_eq!(post_json(&format!("{base}/v1/forget"), json!({"text": "  "})).0, 400);
        assert_eq!(post_json(&format!("{base}/v1/query"), json!({"prompt": ""})).0, 400);
        assert_eq!(post_json(&format!("{base}/v1/query"), json!({"nope": 1})).0, 400);
        assert_eq!(post_json(&format!("{base}/v1/threshold"), json!({"delta": 1.01})).0, 400);
        let (code, body) = post_json(&format!("{base}/v1/threshold"), json!({"delta": 0.9}));
        assert_eq!(code, 200);
        assert_eq!((body["previous"].as_f64(), body["current"].as_f64()), (Some(0.8), Some(0.9)));

        assert_eq!(post_json(&format!("{base}/v1/forget"), json!({"text": "first"})).0, 200);
        assert_eq!(post_json(&format!("{base}/v1/forget"), json!({"text": "second"})).0, 507);
        // answer path reaches the failing upstream
        assert_eq!(post_json(&format!("{base}/v1/query"), json!({"prompt": "unrelated words here"})).0, 504);
        // refuse path never does
        assert_eq!(post_json(&format!("{base}/v1/query"), json!({"prompt": "first"})).0, 200);
    })
    .await;
    gw.stop().await.unwrap();
}

async fn serve_router(app: Router) -> (String, tokio::task::JoinHandle<()>) {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let h = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    (url, h)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_upstream_and_remote_embedder() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let upstream = Router::new().route(
        "/generate",
        post(move |Json(v): Json<Value>| {
            let counter = counter.clone();
            async move {
                counter.fetch_add(1, Ordering::SeqCst);
                Json(json!({"text": format!("echo: {}", v["prompt"].as_str().unwrap())}))
            }
        }),
    );
    let embedder = Router::new().route(
        "/embed",
        post(|Json(v): Json<Value>| async move {
            // bag-of-characters: deterministic and unnormalized on purpose
            let out: Vec<Vec<f64>> = v["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    let mut e = vec![0.5; 8];
                    for b in t.as_str().unwrap().bytes() {
                        e[(b % 8) as usize] += 1.0;
                    }
                    e
                })
                .collect();
            Json(json!({"embeddings": out}))
        }),
    );
    let (up_url, _u) = serve_router(upstream).await;
    let (emb_url, _e) = serve_router(embedder).await;

    let cfg = ServiceConfig {
        upstream: UpstreamKind::Http,
        upstream_url: Some(format!("{up_url}/generate")),
        embedder: forgetgate::io::EmbedderKind::Remote,
        embedder_url: Some(format!("{emb_url}/embed")),
        embedder_dim: 8,
        threshold: 0.999,
        ..Default::default()
    };
    let pipeline = tokio::task::spawn_blocking(move || build_pipeline(&cfg)).await.unwrap().unwrap();
    let gw = Gateway::new(Arc::new(pipeline), 16).spawn("127.0.0.1:0").await.unwrap();
    let base = gw.url();
    let emb = emb_url.clone();
    blocking(move || {
        let (_, a) = post_json(&format!("{base}/v1/query"), json!({"prompt": "hello"}));
        assert_eq!(a["response"], "echo: hello");
        post_json(&format!("{base}/v1/forget"), json!({"text": "secret"}));
        let (_, r) = post_json(&format!("{base}/v1/query"), json!({"prompt": "secret"}));
        assert_eq!(r["action"], "refuse");

        use forgetgate::embed::Embedder;
        let remote = RemoteEmbedder::new(format!("{emb}/embed"), 8, Duration::from_secs(5));
        let v = remote.embed("abc").unwrap();
        assert!(v.is_unit());
        assert_eq!(remote.embed_batch(&["a", "b", "c"]).unwrap().len(), 3);
        let wrong = RemoteEmbedder::new(format!("{emb}/embed"), 9, Duration::from_secs(5));
        assert!(matches!(wrong.embed("x"), Err(forgetgate::Error::EmbedderFailure(_))));
    })
    .await;
    assert_eq!(calls.load(Ordering::SeqCst), 1, "refusal must not reach the upstream");

    // embedder outage maps to 502
    let cfg = ServiceConfig {
        embedder: forgetgate::io::EmbedderKind::Remote,
        embedder_url: Some("http://127.0.0.1:9/none".into()),
        embedder_dim: 8,
        ..Default::default()
    };
    let gw2 = Gateway::new(Arc::new(build_pipeline(&cfg).unwrap()), 4).spawn("127.0.0.1:0").await.unwrap();
    let base2 = gw2.url();
    blocking(move || assert_eq!(post_json(&format!("{base2}/v1/forget"), json!({"text": "x"})).0, 502)).await;
    gw.stop().await.unwrap();
    gw2.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn store_is_persisted_and_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.cur8");
    let cfg = ServiceConfig { store_path: Some(path.clone()), persist_interval_ms: 50, ..Default::default() };
    let gw = Gateway::from_config(&cfg).unwrap().spawn("127.0.0.1:0").await.unwrap();
    let base = gw.url();
    blocking(move || {
        for i in 0..25 {
            assert_eq!(post_json(&format!("{base}/v1/forget"), json!({"text": format!("fact {i}")})).0, 200);
        }
        let (code, report) = post_json(&format!("{base}/v1/compress"), json!({"mode": "compressed", "pca_dim": 8}));
        assert_eq!(code, 200, "{report}");
        assert_eq!(report["count"], 25);
    })
    .await;
    gw.stop().await.unwrap();
    let snap = load_store(&path).unwrap();
    assert_eq!(snap.len(), 25);
    assert_eq!(snap.mode().variant, forgetgate::StoreVariant::Compressed);

    // a restarted service picks the records up
    let gw = Gateway::from_config(&cfg).unwrap().spawn("127.0.0.1:0").await.unwrap();
    let base = gw.url();
    blocking(move || {
        assert_eq!(get_json(&format!("{base}/v1/stats"))["count"], 25);
        let (_, r) = post_json(&format!("{base}/v1/query"), json!({"prompt": "fact 3"}));
        assert_eq!(r["action"], "refuse");
    })
    .await;
    gw.stop().await.unwrap();
}

#[test]
fn configured_store_mode_compresses_on_start() {
    use forgetgate::StoreVariant;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.cur8");

    // too few records to compress: the service starts with an exact store
    let small = ServiceConfig {
        store_path: Some(path.clone()),
        store_mode: StoreVariant::Clustered,
        pca_dim: 8,
        ..Default::default()
    };
    let p = build_pipeline(&small).unwrap();
    assert_eq!(p.stats().store_mode.variant, StoreVariant::Exact);
    for i in 0..30 {
        p.forget(&format!("fact number {i}")).unwrap();
    }
    forgetgate::io::save_store(&path, &p.store().snapshot()).unwrap();

    let p = build_pipeline(&small).unwrap();
    assert_eq!(p.stats().store_mode.variant, StoreVariant::Clustered);
    assert_eq!(p.query("fact number 3").unwrap().action, forgetgate::gate::Action::Refuse);

    // an already reduced store keeps its mode
    forgetgate::io::save_store(&path, &p.store().snapshot()).unwrap();
    let other = ServiceConfig { store_mode: StoreVariant::Compressed, ..small };
    assert_eq!(build_pipeline(&other).unwrap().stats().store_mode.variant, StoreVariant::Clustered);
}
