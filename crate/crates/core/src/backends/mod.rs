//! Model capabilities behind a vendor-neutral HTTP/JSON protocol.
//!
//! The pipeline only sees the four role traits ([`Observer`], [`Thinker`],
//! [`Verifier`], [`Embedder`]). [`RemoteModel`] implements all of them on top
//! of a [`Transport`], which is either a live HTTP client or fixture playback.
//! Request construction and response validation live in [`wire`] and run for
//! both, so a malformed payload is rejected the same way live or mocked.

mod http;
mod mock;
pub mod wire;

use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scene::Entity;

pub use http::HttpTransport;
pub use mock::{FixtureEntry, FixtureSet, MockTransport, RecordingTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observer,
    Thinker,
    Verifier,
    Embedder,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Observer, Role::Thinker, Role::Verifier, Role::Embedder];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Observer => "observer",
            Role::Thinker => "thinker",
            Role::Verifier => "verifier",
            Role::Embedder => "embedder",
        }
    }

    /// Path of the protocol endpoint serving this role.
    pub fn endpoint_path(self) -> &'static str {
        match self {
            Role::Observer => "/v1/detect",
            Role::Thinker => "/v1/complete",
            Role::Verifier => "/v1/vqa",
            Role::Embedder => "/v1/embed",
        }
    }

    /// Environment variable holding the bearer token for this role.
    pub fn token_env_var(self) -> String {
        format!("ELEGANT_{}_TOKEN", self.as_str().to_uppercase())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Mock,
}

/// Connection settings for one role. The token is never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_mode")]
    pub mode: BackendMode,
    /// Send image bytes inline (`image_b64`) instead of the URI.
    #[serde(default)]
    pub inline_images: bool,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_mode() -> BackendMode {
    BackendMode::Mock
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: None,
            token: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            mode: default_mode(),
            inline_images: false,
        }
    }
}

impl BackendConfig {
    pub fn live(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: Some(endpoint.into()),
            mode: BackendMode::Live,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::validation(format!(
                "backend timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.mode == BackendMode::Live && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::validation("live backend requires an endpoint URL"));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// Image handed to the observer, verifier and masking stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierAnswer {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding has dimension 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding has non-finite entries"));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EmbedInput {
    Text(String),
    /// Encoded (PNG) image bytes.
    Image(Vec<u8>),
}

pub trait Observer: Send + Sync {
    fn detect(&self, image: &ImageRef, grounding_text: Option<&str>) -> Result<Vec<Entity>>;
}

pub trait Thinker: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait Verifier: Send + Sync {
    fn answer(&self, image: &ImageRef, question: &str) -> Result<VerifierAnswer>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, input: &EmbedInput) -> Result<EmbeddingVector>;
}

/// One request/response pair as seen by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendExchange {
    pub role: Role,
    pub request: Value,
    pub response: Value,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// Moves a JSON request to the backend for `role` and returns the raw reply.
pub trait Transport: Send + Sync {
    fn call(&self, role: Role, request: &Value) -> Result<BackendExchange>;
}

/// Client for all four roles over a single transport.
pub struct RemoteModel {
    transport: Arc<dyn Transport>,
    inline_images: bool,
    embed_dim: OnceLock<usize>,
    log: Mutex<Vec<BackendExchange>>,
}

impl RemoteModel {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        RemoteModel {
            transport,
            inline_images: false,
            embed_dim: OnceLock::new(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_inline_images(mut self, inline: bool) -> Self {
        self.inline_images = inline;
        self
    }

    fn call(&self, role: Role, request: Value) -> Result<Value> {
        let exchange = self.transport.call(role, &request)?;
        let response = exchange.response.clone();
        self.log.lock().expect("exchange log poisoned").push(exchange);
        Ok(response)
    }

    /// Exchanges so far, ordered by (role, request) so that the log does
    /// not depend on how concurrent calls interleaved.
    pub fn exchange_log(&self) -> Vec<BackendExchange> {
        let mut log = self.log.lock().expect("exchange log poisoned").clone();
        log.sort_by_cached_key(|e| (e.role, wire::canonical_json(&e.request)));
        log
    }
}

impl Observer for RemoteModel {
    fn detect(&self, image: &ImageRef, grounding_text: Option<&str>) -> Result<Vec<Entity>> {
        let req = wire::detect_request(image, grounding_text, self.inline_images)?;
        let resp = self.call(Role::Observer, req)?;
        wire::parse_detect_response(image, &resp)
    }
}

impl Thinker for RemoteModel {
    fn complete(&self, prompt: &str) -> Result<String> {
        let req = wire::complete_request(prompt)?;
        let resp = self.call(Role::Thinker, req)?;
        wire::parse_complete_response(&resp)
    }
}

impl Verifier for RemoteModel {
    fn answer(&self, image: &ImageRef, question: &str) -> Result<VerifierAnswer> {
        let req = wire::vqa_request(image, question, self.inline_images)?;
        let resp = self.call(Role::Verifier, req)?;
        wire::parse_vqa_response(&resp)
    }
}

impl Embedder for RemoteModel {
    fn embed(&self, input: &EmbedInput) -> Result<EmbeddingVector> {
        let req = wire::embed_request(input)?;
        let resp = self.call(Role::Embedder, req)?;
        let v = wire::parse_embed_response(&resp)?;
        let dim = *self.embed_dim.get_or_init(|| v.dim());
        if v.dim() != dim {
            return Err(Error::protocol(
                Role::Embedder,
                format!("embedding dimension changed from {dim} to {}", v.dim()),
            ));
        }
        Ok(v)
    }
}
