//! OpenAI-compatible chat completions and embeddings over blocking HTTP.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, ChatRequest, ChatResponse, LlmError, ProviderConfig, TokenScore, TopLogprob};
use crate::text::truncate_chars;

pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model: String,
    embedding_model: String,
    provider_id: String,
    logprobs: bool,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("has_api_key", &self.api_key.is_some())
            .finish()
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct AssistantMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpBackend {
    /// Explicit config values win over `KGCOT_API_BASE`; the key is read from
    /// the environment variable named by `api_key_env`.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, LlmError> {
        let base_url = config
            .base_url
            .clone()
            .or_else(|| std::env::var("KGCOT_API_BASE").ok())
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| LlmError::Config("http provider requires base_url or KGCOT_API_BASE".into()))?;
        if config.api_key_env.trim().is_empty() {
            return Err(LlmError::Config("http provider requires an api_key_env reference".into()));
        }
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without Authorization", config.api_key_env);
        }
        Ok(Self::new(&base_url, api_key, config))
    }

    pub fn new(base_url: &str, api_key: Option<String>, config: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let base_url = base_url.trim_end_matches('/').to_string();
        HttpBackend {
            agent,
            provider_id: format!("openai-compatible@{base_url}"),
            base_url,
            api_key,
            model: config.model.clone(),
            embedding_model: config.embedding_model.clone(),
            logprobs: config.logprobs,
        }
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, LlmError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body).expect("request body serializes");
        let mut resp = req
            .send(&payload[..])
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                status,
                body: truncate_chars(&text, 300).to_string(),
            });
        }
        Ok(text)
    }
}

impl Backend for HttpBackend {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        if self.logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(5);
        }
        let raw = self.post("chat/completions", &body)?;
        let parsed: CompletionBody = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Protocol(format!("{e}: {}", truncate_chars(&raw, 200))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("no choices in completion".into()))?;
        let text = choice
            .message
            .content
            .ok_or_else(|| LlmError::Protocol("completion without content".into()))?;
        let token_scores = choice.logprobs.and_then(|l| l.content).map(|tokens| {
            tokens
                .into_iter()
                .map(|t| TokenScore {
                    token: t.token,
                    logprob: t.logprob,
                    top: t.top_logprobs,
                })
                .collect()
        });
        Ok(ChatResponse {
            text,
            token_scores,
            provider_id: self.provider_id.clone(),
            cached: false,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        let body = json!({"model": self.embedding_model, "input": texts});
        let raw = self.post("embeddings", &body)?;
        let mut parsed: EmbeddingBody = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Protocol(format!("{e}: {}", truncate_chars(&raw, 200))))?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
