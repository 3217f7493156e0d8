//! Client for the three model capabilities: instruct, complete and seq2seq.
//!
//! Remote endpoints speak a small JSON protocol:
//!
//! ```text
//! POST /v1/instruct {"prompt", "temperature", "max_tokens"}         -> {"outputs": [{"text"}]}
//! POST /v1/complete {"prompt", "n", "temperature", "max_tokens"}    -> {"outputs": [{"text"}]}
//! POST /v1/seq2seq  {"cwe_id", "cwe_name", "code", "beams", "max_tokens"}
//!                                                                   -> {"outputs": [{"text", "score"}]}
//! ```
//!
//! An endpoint of the form `mock:<fixture.jsonl>` replays scripted responses
//! instead; see [`MockGateway`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("mock fixture exhausted for {capability} entry {entry} (call {call})")]
    FixtureExhausted { capability: Capability, entry: usize, call: usize },
    #[error("no mock fixture entry matches this {0} request")]
    NoFixture(Capability),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
}

impl GatewayError {
    /// Transient errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout(_) | GatewayError::Transport(_) => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Instruct,
    Complete,
    Seq2seq,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Instruct => "instruct",
            Capability::Complete => "complete",
            Capability::Seq2seq => "seq2seq",
        }
    }
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A request body; serializes to exactly the wire-protocol JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRequest {
    Instruct { prompt: String, temperature: f64, max_tokens: u32 },
    Complete { prompt: String, n: u32, temperature: f64, max_tokens: u32 },
    Seq2seq { cwe_id: String, cwe_name: String, code: String, beams: u32, max_tokens: u32 },
}

impl ModelRequest {
    pub fn capability(&self) -> Capability {
        match self {
            ModelRequest::Instruct { .. } => Capability::Instruct,
            ModelRequest::Complete { .. } => Capability::Complete,
            ModelRequest::Seq2seq { .. } => Capability::Seq2seq,
        }
    }

    /// Requested output count (samples or beams).
    pub fn n(&self) -> usize {
        match self {
            ModelRequest::Instruct { .. } => 1,
            ModelRequest::Complete { n, .. } => *n as usize,
            ModelRequest::Seq2seq { beams, .. } => *beams as usize,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        match self {
            ModelRequest::Complete { n: 0, .. } => Err(GatewayError::InvalidRequest("n must be >= 1".into())),
            ModelRequest::Seq2seq { beams: 0, .. } => {
                Err(GatewayError::InvalidRequest("beams must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Text searched by mock `contains` matchers.
    fn match_text(&self) -> String {
        match self {
            ModelRequest::Instruct { prompt, .. } | ModelRequest::Complete { prompt, .. } => prompt.clone(),
            ModelRequest::Seq2seq { cwe_id, cwe_name, code, .. } => format!("{cwe_id} {cwe_name}\n{code}"),
        }
    }

    /// SHA-256 over the wire body; identifies repeated identical requests.
    pub fn digest(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&body))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_chars: u64,
    pub output_chars: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub outputs: Vec<ModelOutput>,
    #[serde(default)]
    pub usage: Usage,
}

impl ModelResponse {
    fn finish(mut self, req: &ModelRequest) -> Result<Self, GatewayError> {
        let n = req.n();
        self.outputs.truncate(n);
        if req.capability() == Capability::Seq2seq {
            if self.outputs.iter().any(|o| o.score.is_none()) {
                return Err(GatewayError::Protocol("seq2seq output without score".into()));
            }
            self.outputs.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
        }
        self.usage = Usage {
            prompt_chars: req.match_text().chars().count() as u64,
            output_chars: self.outputs.iter().map(|o| o.text.chars().count() as u64).sum(),
        };
        Ok(self)
    }
}

/// Anything that can serve model requests. Implementations must be shareable across threads.
pub trait ModelGateway: Send + Sync {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

impl<G: ModelGateway + ?Sized> ModelGateway for &G {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).call(request)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for Box<G> {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).call(request)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for std::sync::Arc<G> {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).call(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// Base URL, or `mock:<fixture-path>`.
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    120_000
}
fn default_retries() -> u32 {
    2
}

impl GatewayConfig {
    pub fn mock(fixture: impl AsRef<Path>) -> Self {
        GatewayConfig {
            endpoint: format!("mock:{}", fixture.as_ref().display()),
            api_key_env: None,
            max_in_flight: default_in_flight(),
            timeout_ms: default_timeout(),
            retries: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight < 1 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(GatewayError::Config("endpoint is empty".into()));
        }
        Ok(())
    }

    pub fn mock_fixture(&self) -> Option<&str> {
        self.endpoint.strip_prefix("mock:")
    }
}

/// Caps the number of concurrent calls into the wrapped gateway.
pub struct Limited<G> {
    inner: G,
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
    peak: Mutex<usize>,
}

impl<G> Limited<G> {
    pub fn new(inner: G, max_in_flight: usize) -> Self {
        Limited { inner, max: max_in_flight.max(1), active: Mutex::new(0), freed: Condvar::new(), peak: Mutex::new(0) }
    }

    /// Highest concurrency observed so far.
    pub fn peak_in_flight(&self) -> usize {
        *self.peak.lock().unwrap()
    }
}

impl<G: ModelGateway> ModelGateway for Limited<G> {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        {
            let mut active = self.active.lock().unwrap();
            while *active >= self.max {
                active = self.freed.wait(active).unwrap();
            }
            *active += 1;
            let mut peak = self.peak.lock().unwrap();
            *peak = (*peak).max(*active);
        }
        let result = self.inner.call(request);
        *self.active.lock().unwrap() -= 1;
        self.freed.notify_one();
        result
    }
}

/// Builds the gateway described by `config`, wrapped in its concurrency limit.
/// Relative mock fixture paths resolve against `base_dir`.
pub fn connect(config: &GatewayConfig, base_dir: &Path) -> Result<Box<dyn ModelGateway>, GatewayError> {
    config.validate()?;
    let inner: Box<dyn ModelGateway> = match config.mock_fixture() {
        Some(path) => Box::new(MockGateway::from_file(&resolve(base_dir, path))?),
        None => Box::new(HttpGateway::new(config.clone())?),
    };
    Ok(Box::new(Limited::new(inner, config.max_in_flight)))
}

/// JSON-over-HTTP client with bounded retries and exponential backoff.
pub struct HttpGateway {
    config: GatewayConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    backoff_base: Duration,
}

impl HttpGateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(HttpGateway { config, agent, api_key, backoff_base: Duration::from_millis(200) })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn url(&self, capability: Capability) -> String {
        format!("{}/v1/{}", self.config.endpoint.trim_end_matches('/'), capability.as_str())
    }

    fn attempt(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let mut req = self.agent.post(&self.url(request.capability())).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).expect("request serializes");
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout(self.config.timeout_ms),
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status { status, body: text });
        }
        let parsed: ModelResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("{e}: {text}")))?;
        if parsed.outputs.len() > request.n() {
            return Err(GatewayError::Protocol(format!(
                "{} outputs for n = {}",
                parsed.outputs.len(),
                request.n()
            )));
        }
        parsed.finish(request)
    }
}

impl ModelGateway for HttpGateway {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let mut attempt = 0;
        loop {
            match self.attempt(request) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < self.config.retries => {
                    let delay = self.backoff_base * 2u32.saturating_pow(attempt);
                    log::warn!("{} call failed ({e}); retrying in {delay:?}", request.capability());
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// One line of a mock fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub capability: Capability,
    #[serde(rename = "match", default)]
    pub matcher: Option<FixtureMatch>,
    pub responses: Vec<FixtureResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMatch {
    pub contains: String,
}

/// A scripted reply: a bare string (one output), a full response body, or a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureResponse {
    Text(String),
    Body { outputs: Vec<ModelOutput> },
    Error { error: String },
}

/// Replays fixture responses.
///
/// A request is served by the first entry whose capability matches and whose
/// `contains` string (if any) occurs in the request text. Each (entry, request
/// digest) key walks that entry's responses in order, so identical requests
/// advance through the script while distinct requests each start at the first
/// response. Running past the end is a [`GatewayError::FixtureExhausted`].
///
/// For `complete`, a response with fewer outputs than `n` is cycled up to `n`.
pub struct MockGateway {
    entries: Vec<FixtureEntry>,
    cursors: Mutex<HashMap<(usize, String), usize>>,
    calls: Mutex<usize>,
}

impl MockGateway {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        MockGateway { entries, cursors: Mutex::new(HashMap::new()), calls: Mutex::new(0) }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        Self::from_jsonl(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<FixtureEntry>, _>>()?;
        Ok(Self::new(entries))
    }

    /// Total calls served (including failures).
    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

impl ModelGateway for MockGateway {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        *self.calls.lock().unwrap() += 1;
        request.validate()?;
        let capability = request.capability();
        let text = request.match_text();
        let (entry_idx, entry) = self
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| {
                e.capability == capability && e.matcher.as_ref().is_none_or(|m| text.contains(&m.contains))
            })
            .ok_or(GatewayError::NoFixture(capability))?;

        let call = {
            let mut cursors = self.cursors.lock().unwrap();
            let cursor = cursors.entry((entry_idx, request.digest())).or_insert(0);
            let call = *cursor;
            *cursor += 1;
            call
        };
        let scripted = entry.responses.get(call).ok_or(GatewayError::FixtureExhausted {
            capability,
            entry: entry_idx,
            call: call + 1,
        })?;

        let mut outputs = match scripted {
            FixtureResponse::Text(t) => vec![ModelOutput { text: t.clone(), score: None }],
            FixtureResponse::Body { outputs } => outputs.clone(),
            FixtureResponse::Error { error } => return Err(GatewayError::Scripted(error.clone())),
        };
        if capability == Capability::Complete && !outputs.is_empty() && outputs.len() < request.n() {
            let base = outputs.clone();
            outputs = base.iter().cycle().take(request.n()).cloned().collect();
        }
        ModelResponse { outputs, usage: Usage::default() }.finish(request)
    }
}

/// Resolves a possibly-relative fixture path.
pub fn resolve(base_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Raw JSON view of a request, for logs and manifests.
pub fn request_json(request: &ModelRequest) -> Value {
    serde_json::to_value(request).expect("request serializes")
}
