use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{require_text, BackendError, Embedder, EmbeddingVector, GenerationRequest, GenerationResult, Generator};
use crate::retriever::{tokenize, IndexParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub kind: MatchKind,
    pub value: String,
}

/// One line of a mock script: `{"match":{"kind":..,"value":..},"response":..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub response: String,
}

impl ScriptRule {
    pub fn exact(value: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: RuleMatch {
                kind: MatchKind::Exact,
                value: value.into(),
            },
            response: response.into(),
        }
    }

    pub fn substring(value: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: RuleMatch {
                kind: MatchKind::Substring,
                value: value.into(),
            },
            response: response.into(),
        }
    }

    fn matches(&self, prompt: &str) -> bool {
        match self.matcher.kind {
            MatchKind::Exact => prompt == self.matcher.value,
            MatchKind::Substring => prompt.contains(&self.matcher.value),
        }
    }
}

/// Scripted generator. Rules are tried in order against the user prompt;
/// the first hit wins, otherwise the fallback (if any) is returned.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    name: String,
    rules: Vec<ScriptRule>,
    fallback: Option<String>,
}

impl MockGenerator {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            name: "mock".into(),
            rules,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = Some(fallback.into());
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::new(Vec::new()).with_fallback(text)
    }

    pub fn from_script_str(raw: &str) -> Result<Self, BackendError> {
        let mut rules = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule = serde_json::from_str(line).map_err(|e| BackendError::Script {
                line: i + 1,
                message: e.to_string(),
            })?;
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    pub fn from_script_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path).map_err(|e| BackendError::Script {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_script_str(&raw)
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let text = self
            .rules
            .iter()
            .find(|r| r.matches(&request.user_prompt))
            .map(|r| r.response.clone())
            .or_else(|| self.fallback.clone())
            .ok_or(BackendError::NoScriptMatch)?;
        Ok(GenerationResult {
            text,
            model_name: self.name.clone(),
            latency: Duration::ZERO,
            token_usage: None,
        })
    }

    fn model_name(&self) -> &str {
        &self.name
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Hashed bag-of-words: each lowercased token adds 1 to bucket
/// `fnv1a_64(token) % dim`, and the counts are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a_64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(super::DEFAULT_EMBED_DIM)
    }
}

impl Embedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        require_text(text)?;
        let mut counts = vec![0.0; self.dim];
        for token in tokenize(text, &IndexParams::default()) {
            counts[self.bucket(&token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|c| *c /= norm);
        }
        Ok(EmbeddingVector::new(counts))
    }
}

/// Returns fixed vectors for known texts. Useful for injecting exact scores.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    table: HashMap<String, EmbeddingVector>,
}

impl TableEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: EmbeddingVector) -> &mut Self {
        self.table.insert(text.into(), vector);
        self
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        require_text(text)?;
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| BackendError::InvalidRequest(format!("no table entry for {text:?}")))
    }
}
