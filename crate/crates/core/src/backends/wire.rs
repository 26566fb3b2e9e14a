//! HTTP clients: an OpenAI-compatible chat endpoint for the VLM, plus simple
//! JSON services for segmentation and embedding.
//!
//! Transient failures (HTTP 429/5xx and transport errors) are retried with
//! exponential backoff; authentication failures are immediate hard errors.

use super::scripted::RleMask;
use super::{BackendError, EmbeddingProvider, SegBackend, VlmBackend, VlmRequest};
use crate::scene::{Mask2D, Scene};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

pub const ENDPOINT_ENV: &str = "OPENGROUND_ENDPOINT";
pub const API_KEY_ENV: &str = "OPENGROUND_API_KEY";
pub const MODEL_ENV: &str = "OPENGROUND_MODEL";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// Caps concurrent in-flight requests on a shared client handle.
struct InFlightGate {
    limit: usize,
    state: Mutex<usize>,
    cv: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut count = self.state.lock().unwrap();
        while *count >= self.limit {
            count = self.cv.wait(count).unwrap();
        }
        *count += 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut count = self.gate.state.lock().unwrap();
        *count -= 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct WireConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl WireConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads endpoint, key, and model from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| BackendError::Config(format!("{ENDPOINT_ENV} is not set")))?;
        let model = std::env::var(MODEL_ENV)
            .map_err(|_| BackendError::Config(format!("{MODEL_ENV} is not set")))?;
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        Ok(cfg)
    }
}

fn classify_status(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::Auth(format!("http {status}: {body}")),
        429 => BackendError::Transport {
            message: "rate limited (http 429)".into(),
            retryable: true,
        },
        500..=599 => BackendError::Transport {
            message: format!("http {status}: {body}"),
            retryable: true,
        },
        _ => BackendError::Status { status, body },
    }
}

fn send_with_retry(
    retry: &RetryPolicy,
    mut attempt_fn: impl FnMut() -> Result<(u16, String), BackendError>,
) -> Result<String, BackendError> {
    let mut last = None;
    for attempt in 0..=retry.max_retries {
        if attempt > 0 {
            std::thread::sleep(retry.delay(attempt - 1));
        }
        match attempt_fn() {
            Ok((status, body)) if (200..300).contains(&status) => return Ok(body),
            Ok((status, body)) => {
                let err = classify_status(status, body);
                match err {
                    BackendError::Transport {
                        retryable: true, ..
                    } => last = Some(err),
                    hard => return Err(hard),
                }
            }
            Err(err) => match err {
                BackendError::Transport {
                    retryable: true, ..
                } => last = Some(err),
                hard => return Err(hard),
            },
        }
    }
    Err(last.unwrap_or(BackendError::Transport {
        message: "retries exhausted".into(),
        retryable: false,
    }))
}

fn http_post(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<(u16, String), BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let resp = req.send().map_err(|e| BackendError::Transport {
        message: e.to_string(),
        retryable: true,
    })?;
    let status = resp.status().as_u16();
    let text = resp.text().map_err(|e| BackendError::Transport {
        message: e.to_string(),
        retryable: true,
    })?;
    Ok((status, text))
}

fn make_client(timeout: Duration) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Config(format!("http client: {e}")))
}

/// OpenAI-compatible chat client. Images ride as base64 PNG data URLs in the
/// order they were attached.
pub struct WireVlm {
    cfg: WireConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl WireVlm {
    pub fn new(cfg: WireConfig) -> Result<Self, BackendError> {
        let client = make_client(cfg.timeout)?;
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self { cfg, client, gate })
    }

    fn chat_url(&self) -> String {
        let base = self.cfg.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl VlmBackend for WireVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for image in &request.images {
            let b64 = base64::engine::general_purpose::STANDARD.encode(image.png_bytes());
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        let body = json!({
            "model": self.cfg.model,
            "temperature": request.params.temperature,
            "messages": [{"role": "user", "content": content}],
        });
        let url = self.chat_url();
        let raw = send_with_retry(&self.cfg.retry, || {
            http_post(&self.client, &url, self.cfg.api_key.as_deref(), &body)
        })?;
        let parsed: ChatResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::schema(format!("chat response: {e}"), &raw))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::schema("chat response has no choices", &raw))
    }
}

/// Client for a segmentation service speaking
/// `{image, label, thresholds} -> {masks: [rle], scores: [float]}`.
pub struct WireSeg {
    cfg: WireConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
    pub text_threshold: f64,
    pub box_threshold: f64,
}

impl WireSeg {
    pub fn new(cfg: WireConfig) -> Result<Self, BackendError> {
        let client = make_client(cfg.timeout)?;
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            client,
            gate,
            text_threshold: 0.4,
            box_threshold: 0.4,
        })
    }
}

#[derive(Deserialize)]
struct SegResponse {
    masks: Vec<RleMask>,
    #[serde(default)]
    #[allow(dead_code)]
    scores: Vec<f64>,
}

impl SegBackend for WireSeg {
    fn segment(
        &self,
        scene: &Scene,
        view_id: u32,
        label: &str,
    ) -> Result<Vec<Mask2D>, BackendError> {
        let _permit = self.gate.acquire();
        let view = scene
            .view(view_id)
            .map_err(|e| BackendError::Scene(e.to_string()))?;
        let image = super::ImagePayload::from_image(&view.image)?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(image.png_bytes());
        let body = json!({
            "image": b64,
            "label": label,
            "thresholds": {"text": self.text_threshold, "box": self.box_threshold},
        });
        let raw = send_with_retry(&self.cfg.retry, || {
            http_post(
                &self.client,
                &self.cfg.endpoint,
                self.cfg.api_key.as_deref(),
                &body,
            )
        })?;
        let parsed: SegResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::schema(format!("seg response: {e}"), &raw))?;
        parsed.masks.iter().map(|m| m.to_mask(view_id)).collect()
    }
}

/// Client for an embedding service speaking `{texts} -> {embeddings}`.
/// Responses are L2-normalized and memoized per text for the session.
pub struct WireEmbed {
    cfg: WireConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl WireEmbed {
    pub fn new(cfg: WireConfig) -> Result<Self, BackendError> {
        let client = make_client(cfg.timeout)?;
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            client,
            gate,
            cache: Mutex::new(HashMap::new()),
        })
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

impl EmbeddingProvider for WireEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let _permit = self.gate.acquire();
        let body = json!({"texts": [text]});
        let raw = send_with_retry(&self.cfg.retry, || {
            http_post(
                &self.client,
                &self.cfg.endpoint,
                self.cfg.api_key.as_deref(),
                &body,
            )
        })?;
        let parsed: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::schema(format!("embed response: {e}"), &raw))?;
        let vector = parsed
            .embeddings
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::schema("embed response has no vectors", text))?;
        let norm: f64 = vector
            .iter()
            .map(|x| f64::from(*x) * f64::from(*x))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(BackendError::Embedding {
                text: text.to_string(),
                reason: format!("non-normalizable vector (norm {norm})"),
            });
        }
        let unit: Vec<f32> = vector
            .into_iter()
            .map(|x| (f64::from(x) / norm) as f32)
            .collect();
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), unit.clone());
        Ok(unit)
    }
}
