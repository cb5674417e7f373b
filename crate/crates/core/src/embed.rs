//! Client for an external embeddings endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::ClientError;
use crate::corpus::EmbeddingMatrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingClientConfig {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    /// Texts per request.
    pub batch_size: usize,
    pub timeout_secs: u64,
}

impl EmbeddingClientConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token: None,
            batch_size: 64,
            timeout_secs: 600,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
}

pub struct EmbeddingClient {
    config: EmbeddingClientConfig,
    http: reqwest::blocking::Client,
}

impl EmbeddingClient {
    pub fn new(config: EmbeddingClientConfig) -> Result<Self, ClientError> {
        if config.batch_size == 0 {
            return Err(ClientError::Config("batch_size must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        let body = WireRequest {
            input: batch,
            model: &self.config.model,
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
        if parsed.data.len() != batch.len() {
            return Err(ClientError::Malformed(format!(
                "sent {} texts, received {} embeddings",
                batch.len(),
                parsed.data.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|e| e.embedding).collect())
    }

    /// Embed `texts` in batches; row i of the result embeds `texts[i]`.
    pub fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        let mut rows = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size) {
            rows.extend(self.request(batch)?);
        }
        EmbeddingMatrix::from_rows(&rows).map_err(|e| ClientError::Malformed(e.to_string()))
    }
}
