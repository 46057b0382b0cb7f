use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest, ChatResponse, LlmError, TokenScore};
use crate::text::normalize_label;

/// Scripted provider behaviour, read from `scenario.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rules: Vec<ScenarioRule>,
    #[serde(default)]
    pub default_reply: Option<String>,
    /// Fixed vectors for specific texts (keys are normalized on load).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

fn default_dim() -> usize {
    16
}

/// First matching rule (file order) answers. A rule matches when its `tag`
/// (if set) equals the request tag and its `contains` (if set) occurs in the
/// request transcript. `fail` scripts a provider error instead of a reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRule {
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub fail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<TokenScore>>,
}

impl ScenarioRule {
    fn matches(&self, request: &ChatRequest, transcript: &str) -> bool {
        self.tag.as_deref().is_none_or(|t| t == request.tag)
            && self.contains.as_deref().is_none_or(|c| transcript.contains(c))
    }
}

pub struct MockBackend {
    scenario: Scenario,
    model: String,
}

impl MockBackend {
    pub fn new(mut scenario: Scenario) -> Result<Self, LlmError> {
        if scenario.embedding_dim == 0 {
            return Err(LlmError::Config("embedding_dim must be positive".into()));
        }
        for (i, rule) in scenario.rules.iter().enumerate() {
            if rule.reply.is_none() && rule.fail.is_none() {
                return Err(LlmError::Config(format!("rule {i} has neither reply nor fail")));
            }
        }
        scenario.embeddings = std::mem::take(&mut scenario.embeddings)
            .into_iter()
            .map(|(k, v)| (normalize_label(&k), v))
            .collect();
        if let Some((text, v)) = scenario
            .embeddings
            .iter()
            .find(|(_, v)| v.len() != scenario.embedding_dim)
        {
            return Err(LlmError::Config(format!(
                "embedding for {text:?} has {} dims, expected {}",
                v.len(),
                scenario.embedding_dim
            )));
        }
        let digest = Sha256::digest(serde_json::to_vec(&scenario).expect("scenario serializes"));
        let model = format!("scenario-{}", &hex::encode(digest)[..12]);
        Ok(MockBackend { scenario, model })
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let bytes = std::fs::read(path)
            .map_err(|e| LlmError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let scenario: Scenario = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::Config(format!("invalid scenario {}: {e}", path.display())))?;
        MockBackend::new(scenario)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

/// Deterministic pseudo-random vector for a (normalized) text: component `j`
/// is the first 8 bytes of `sha256(seed_le ‖ j_le32 ‖ text)` mapped to [-1, 1).
pub fn hash_embedding(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    (0..dim as u32)
        .map(|j| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(j.to_le_bytes());
            h.update(text.as_bytes());
            let d = h.finalize();
            let mut word = [0u8; 8];
            word.copy_from_slice(&d[..8]);
            (u64::from_le_bytes(word) as f64 / 18_446_744_073_709_551_616.0) * 2.0 - 1.0
        })
        .collect()
}

impl Backend for MockBackend {
    fn provider_id(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let transcript = request.transcript();
        let rule = self.scenario.rules.iter().find(|r| r.matches(request, &transcript));
        let (text, token_scores) = match rule {
            Some(ScenarioRule { fail: Some(msg), .. }) => return Err(LlmError::Scripted(msg.clone())),
            Some(rule) => (rule.reply.clone().unwrap_or_default(), rule.token_scores.clone()),
            None => match &self.scenario.default_reply {
                Some(reply) => (reply.clone(), None),
                None => {
                    return Err(LlmError::NoRule {
                        tag: request.tag.clone(),
                    })
                }
            },
        };
        Ok(ChatResponse {
            text,
            token_scores,
            provider_id: "mock".into(),
            cached: false,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        Ok(texts
            .iter()
            .map(|t| {
                let key = normalize_label(t);
                self.scenario
                    .embeddings
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| hash_embedding(&key, self.scenario.seed, self.scenario.embedding_dim))
            })
            .collect())
    }
}
