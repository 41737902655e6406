//! Blocking client for the chat-completions and embeddings wire protocol.

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{require_text, BackendError, Embedder, EmbeddingVector, GenerationRequest, GenerationResult, Generator, TokenUsage};

pub const API_KEY_ENV: &str = "DUET_API_KEY";
pub const BASE_URL_ENV: &str = "DUET_BASE_URL";

/// Exponential backoff for transport failures: `base · 2^attempt`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "super::duration_ms")]
    pub base_delay: Duration,
    #[serde(with = "super::duration_ms")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_concurrency: usize,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_concurrency: 4,
        }
    }

    /// Fills `base_url` (when empty) and `api_key` from `DUET_BASE_URL` / `DUET_API_KEY`.
    pub fn with_env(mut self) -> Self {
        if self.base_url.is_empty() {
            if let Ok(url) = std::env::var(BASE_URL_ENV) {
                self.base_url = url;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        self
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
struct Transport {
    config: HttpConfig,
    client: Client,
    permits: Permits,
}

impl Transport {
    fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            permits: Permits::new(config.max_concurrency),
            config,
            client,
        })
    }

    /// POSTs `body` and returns the 2xx response body. The body is built once
    /// by the caller, so every retry sends the identical request.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let _permit = self.permits.acquire();
        let url = self.config.endpoint(path);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| {
                        if e.is_timeout() {
                            BackendError::Timeout(self.config.timeout)
                        } else {
                            BackendError::Protocol {
                                status: status.as_u16(),
                                body: format!("unreadable body: {e}"),
                            }
                        }
                    })?;
                    if !status.is_success() {
                        return Err(BackendError::Protocol {
                            status: status.as_u16(),
                            body: text,
                        });
                    }
                    return Ok(text);
                }
                Err(e) if e.is_timeout() => return Err(BackendError::Timeout(self.config.timeout)),
                Err(e) => {
                    if attempt >= self.config.retry.max_retries {
                        return Err(BackendError::Unavailable {
                            attempts: attempt + 1,
                            message: e.to_string(),
                        });
                    }
                    let delay = self.config.retry.delay(attempt);
                    log::warn!("request to {url} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug)]
pub struct HttpGenerator {
    transport: Transport,
}

impl HttpGenerator {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        json!({
            "model": self.transport.config.model,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": request.stop,
        })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let raw = self.transport.post("/v1/chat/completions", &self.body(request))?;
        let parsed: ChatResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Protocol {
            status: 200,
            body: format!("unexpected completion payload ({e}): {raw}"),
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| BackendError::Protocol {
            status: 200,
            body: format!("completion has no choices: {raw}"),
        })?;
        Ok(GenerationResult {
            text: choice.message.content,
            model_name: self.transport.config.model.clone(),
            latency: started.elapsed(),
            token_usage: parsed.usage,
        })
    }

    fn model_name(&self) -> &str {
        &self.transport.config.model
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Embeddings over `POST <base_url>/v1/embeddings`. The first response fixes
/// the dimension; any later vector of another size is a protocol error.
#[derive(Debug)]
pub struct HttpEmbedder {
    transport: Transport,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(config)?,
            dim: OnceLock::new(),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        require_text(text)?;
        let body = json!({"model": self.transport.config.model, "input": text});
        let raw = self.transport.post("/v1/embeddings", &body)?;
        let parsed: EmbeddingResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Protocol {
            status: 200,
            body: format!("unexpected embedding payload ({e}): {raw}"),
        })?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| BackendError::Protocol {
                status: 200,
                body: format!("embedding response holds no vector: {raw}"),
            })?;
        let expected = *self.dim.get_or_init(|| values.len());
        if values.len() != expected {
            return Err(BackendError::Protocol {
                status: 200,
                body: BackendError::DimMismatch {
                    expected,
                    got: values.len(),
                }
                .to_string(),
            });
        }
        Ok(EmbeddingVector::new(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(3), Duration::from_millis(500));
        assert_eq!(p.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn endpoint_joins_cleanly() {
        let c = HttpConfig::new("http://localhost:8000/", "m");
        assert_eq!(c.endpoint("/v1/chat/completions"), "http://localhost:8000/v1/chat/completions");
    }

    #[test]
    fn permits_bound_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let permits = Permits::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = permits.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
