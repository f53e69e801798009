//! Blocking HTTP clients for the embedding provider, the upstream model and
//! the surrogate generator.

use std::io;
use std::time::Duration;

use forgetgate::datagen::SurrogateClient;
use forgetgate::embed::Embedder;
use forgetgate::pipeline::Upstream;
use forgetgate::{Embedding, Error, Result};
use serde::{Deserialize, Serialize};

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn is_timeout(err: &ureq::Error) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

fn describe(url: &str, err: ureq::Error) -> String {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            format!("{url} answered {code}: {}", body.chars().take(200).collect::<String>())
        }
        other => format!("{url}: {other}"),
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Embedding provider reached over HTTP: `POST {"texts": [..]}` returning
/// `{"embeddings": [[..]]}`. Vectors are re-normalized on arrival.
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        Self { url: url.into(), dim, agent: agent(timeout) }
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::EmbedderFailure(describe(&self.url, e)))?;
        let body: EmbedResponse = resp
            .into_json()
            .map_err(|e| Error::EmbedderFailure(format!("{}: malformed response: {e}", self.url)))?;
        if body.embeddings.len() != texts.len() {
            return Err(Error::EmbedderFailure(format!(
                "{} returned {} embeddings for {} texts",
                self.url,
                body.embeddings.len(),
                texts.len()
            )));
        }
        body.embeddings
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::EmbedderFailure(format!("expected dimension {}, got {}", self.dim, v.len())));
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n.is_finite() && n > 0.0) {
                    return Err(Error::EmbedderFailure("provider returned a zero or non-finite vector".into()));
                }
                Embedding::new(v.iter().map(|x| (x / n) as f32).collect())
                    .map_err(|e| Error::EmbedderFailure(e.to_string()))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.request(texts)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

fn generate(agent: &ureq::Agent, url: &str, prompt: &str, max_tokens: u32) -> std::result::Result<String, ureq::Error> {
    let resp = agent.post(url).send_json(GenerateRequest { prompt, max_tokens })?;
    let body: GenerateResponse = resp.into_json().map_err(|e| {
        ureq::Error::Status(
            502,
            ureq::Response::new(502, "Bad Gateway", &format!("malformed response: {e}")).expect("static response"),
        )
    })?;
    Ok(body.text)
}

/// Upstream model behind `POST {"prompt", "max_tokens"}` returning `{"text"}`.
pub struct HttpUpstream {
    url: String,
    agent: ureq::Agent,
}

impl HttpUpstream {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self { url: url.into(), agent: agent(timeout) }
    }
}

impl Upstream for HttpUpstream {
    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String> {
        generate(&self.agent, &self.url, prompt, max_tokens).map_err(|e| {
            if is_timeout(&e) {
                Error::UpstreamTimeout
            } else {
                Error::UpstreamFailure(describe(&self.url, e))
            }
        })
    }
}

/// Surrogate generator with the same wire contract as [`HttpUpstream`].
pub struct HttpSurrogate {
    url: String,
    agent: ureq::Agent,
}

impl HttpSurrogate {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self { url: url.into(), agent: agent(timeout) }
    }
}

impl SurrogateClient for HttpSurrogate {
    fn complete(&self, prompt: &str, max_tokens: u32) -> Result<String> {
        generate(&self.agent, &self.url, prompt, max_tokens)
            .map_err(|e| Error::SurrogateUnavailable(describe(&self.url, e)))
    }
}
