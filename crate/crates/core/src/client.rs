//! Text-in/text-out completion clients.
//!
//! [`HttpChatClient`] speaks the common chat-completions wire shape;
//! [`MockClient`] is a deterministic stand-in for tests and offline runs.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_URL: &str = "SEMTREE_LLM_URL";
pub const ENV_TOKEN: &str = "SEMTREE_LLM_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// What a request is for. Only the mock looks at it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    InferField,
    Reconcile,
    Repair,
    Transcribe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRequest {
    pub purpose: Purpose,
    pub messages: Vec<ChatMessage>,
    /// Structured inputs the prompt was rendered from (chunk texts, labels,
    /// the answer under repair, or label followed by categories).
    pub inputs: Vec<String>,
}

impl CompletionRequest {
    pub fn prompt(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError>;
}

impl<T: CompletionClient + ?Sized> CompletionClient for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<T: CompletionClient + ?Sized> CompletionClient for Box<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

impl ClientConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            temperature: 0.0,
            seed: None,
            token: None,
            timeout_secs: default_timeout(),
        }
    }

    /// Endpoint from `SEMTREE_LLM_URL`, token from `SEMTREE_LLM_TOKEN`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, ClientError> {
        let url = std::env::var(ENV_URL).map_err(|_| ClientError::Config(format!("{ENV_URL} is not set")))?;
        let mut config = Self::new(url, model);
        config.token = std::env::var(ENV_TOKEN).ok();
        Ok(config)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Blocking chat-completions client.
pub struct HttpChatClient {
    config: ClientConfig,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }
}

impl CompletionClient for HttpChatClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: self.config.temperature,
            seed: self.config.seed,
        };
        let mut builder = self.http.post(&self.config.url).json(&body);
        if let Some(token) = &self.config.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Malformed("no choices in response".into()))?;
        Ok(choice.message.content.unwrap_or_default())
    }
}

type Script = dyn Fn(&CompletionRequest, usize) -> Option<Result<String, ClientError>> + Send + Sync;

/// Deterministic offline client.
///
/// Default replies depend only on the seed and the request:
/// - infer: `Topic: <8 hex digits of a hash of the prompt>`
/// - reconcile: the common label if all inputs agree, else `Field: <hash>`
/// - repair: the last non-empty line of the answer, cut to 80 characters
/// - transcribe: a category picked by hashing the label
///
/// A script closure can override any reply; it receives the request and the
/// zero-based call number and returns `None` to fall through to the default.
pub struct MockClient {
    seed: u64,
    script: Option<Box<Script>>,
    log: Mutex<Vec<CompletionRequest>>,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            script: None,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_script<F>(seed: u64, script: F) -> Self
    where
        F: Fn(&CompletionRequest, usize) -> Option<Result<String, ClientError>> + Send + Sync + 'static,
    {
        Self {
            seed,
            script: Some(Box::new(script)),
            log: Mutex::new(Vec::new()),
        }
    }

    /// All requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls_for(&self, purpose: Purpose) -> usize {
        self.log.lock().unwrap().iter().filter(|r| r.purpose == purpose).count()
    }

    fn digest(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let bytes = h.finalize();
        bytes[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn default_reply(&self, request: &CompletionRequest) -> String {
        match request.purpose {
            Purpose::InferField => format!("Topic: {}", self.digest(&request.prompt())),
            Purpose::Reconcile => match request.inputs.first() {
                Some(first) if request.inputs.iter().all(|l| l == first) => first.clone(),
                _ => format!("Field: {}", self.digest(&request.inputs.join("\n"))),
            },
            Purpose::Repair => {
                let answer = request.inputs.first().map(String::as_str).unwrap_or("");
                let line = answer.lines().map(str::trim).rfind(|l| !l.is_empty()).unwrap_or("");
                line.chars().take(80).collect()
            }
            Purpose::Transcribe => {
                let (label, categories) = request.inputs.split_first().expect("label and categories");
                if categories.is_empty() {
                    return String::new();
                }
                let h = self.digest(label);
                let pick = u32::from_str_radix(&h, 16).unwrap() as usize % categories.len();
                categories[pick].clone()
            }
        }
    }
}

impl CompletionClient for MockClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        let call = {
            let mut log = self.log.lock().unwrap();
            log.push(request.clone());
            log.len() - 1
        };
        if let Some(script) = &self.script {
            if let Some(reply) = script(request, call) {
                return reply;
            }
        }
        Ok(self.default_reply(request))
    }
}
