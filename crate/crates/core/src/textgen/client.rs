use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PromptBundle, TextGenError};

pub const DEFAULT_API_KEY_ENV: &str = "ADREASON_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: Option<f64>,
    /// `None` leaves top-k sampling disabled.
    pub top_k: Option<u32>,
    pub min_p: Option<f64>,
}

impl Sampling {
    pub fn generation() -> Self {
        Self { temperature: 1.0, top_p: Some(1.0), top_k: None, min_p: None }
    }

    pub fn inference() -> Self {
        Self { temperature: 1.5, top_p: None, top_k: None, min_p: Some(0.1) }
    }
}

/// Exponential backoff: `base * factor^attempt`, plus up to `jitter` of that
/// delay chosen at random.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay: Duration::from_secs(1), factor: 2.0, jitter: 0.25 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        let extra = if self.jitter > 0.0 { rand::rng().random::<f64>() * self.jitter * nominal } else { 0.0 };
        Duration::from_secs_f64(nominal + extra)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MllmClientConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub model: String,
    pub sampling: Sampling,
    pub max_output_tokens: u32,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
    pub max_parallel_requests: usize,
}

impl MllmClientConfig {
    pub fn generation(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            model: model.into(),
            sampling: Sampling::generation(),
            max_output_tokens: 512,
            request_timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_parallel_requests: 8,
        }
    }

    pub fn inference(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self { sampling: Sampling::inference(), ..Self::generation(base_url, model) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    /// Retries spent before the successful call.
    pub retries: u32,
}

/// Anything that turns a prompt bundle into model text.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, TextGenError>;
}

pub fn data_url(bytes: &[u8]) -> String {
    let mime = match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        _ => "image/png",
    };
    format!("data:{mime};base64,{}", STANDARD.encode(bytes))
}

/// Chat-completions request body: system message, then a user message with
/// the reference image, the input image and the text, in that order.
pub fn request_body(bundle: &PromptBundle, cfg: &MllmClientConfig) -> Value {
    let image = |b: &[u8]| json!({"type": "image_url", "image_url": {"url": data_url(b)}});
    let mut body = json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": bundle.system_prompt},
            {"role": "user", "content": [
                image(&bundle.reference_image),
                image(&bundle.input_image),
                {"type": "text", "text": bundle.user_prompt},
            ]},
        ],
        "temperature": cfg.sampling.temperature,
        "max_tokens": cfg.max_output_tokens,
    });
    let obj = body.as_object_mut().expect("object literal");
    if let Some(v) = cfg.sampling.top_p {
        obj.insert("top_p".into(), json!(v));
    }
    if let Some(v) = cfg.sampling.top_k {
        obj.insert("top_k".into(), json!(v));
    }
    if let Some(v) = cfg.sampling.min_p {
        obj.insert("min_p".into(), json!(v));
    }
    body
}

/// Reads a non-empty API key from `env_name`.
pub fn api_key(env_name: &str) -> Result<String, TextGenError> {
    match std::env::var(env_name) {
        Ok(k) if !k.is_empty() => Ok(k),
        _ => Err(TextGenError::Auth(format!("environment variable {env_name} is not set"))),
    }
}

pub(crate) fn http_client(timeout: Duration) -> Result<Client, TextGenError> {
    Client::builder().timeout(timeout).build().map_err(|e| TextGenError::Transport(e.to_string()))
}

/// POSTs `body` with bearer auth, retrying transport errors, 429 and 5xx.
/// Returns the parsed JSON response and the number of retries used.
pub(crate) fn post_json_with_retry(
    client: &Client,
    url: &str,
    key: &str,
    body: &Value,
    retry: &RetryPolicy,
) -> Result<(Value, u32), TextGenError> {
    let mut attempt = 0;
    loop {
        let outcome = client.post(url).bearer_auth(key).json(body).send();
        let last = match outcome {
            Err(e) => TextGenError::Transport(e.to_string()),
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let v: Value = resp.json().map_err(|e| TextGenError::Transport(e.to_string()))?;
                    return Ok((v, attempt));
                }
                let text = resp.text().unwrap_or_default();
                match status {
                    StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                        return Err(TextGenError::Auth(format!("{status}: {text}")));
                    }
                    StatusCode::TOO_MANY_REQUESTS => TextGenError::RateLimited { attempts: attempt + 1 },
                    s if s.is_server_error() => TextGenError::Http { status: s.as_u16(), body: text },
                    s => return Err(TextGenError::Http { status: s.as_u16(), body: text }),
                }
            }
        };
        if attempt >= retry.max_retries {
            return Err(last);
        }
        log::warn!("request to {url} failed ({last}); retrying");
        thread::sleep(retry.delay(attempt));
        attempt += 1;
    }
}

/// Blocking chat-completions client.
pub struct HttpMllmClient {
    cfg: MllmClientConfig,
    client: Client,
}

impl HttpMllmClient {
    pub fn new(cfg: MllmClientConfig) -> Result<Self, TextGenError> {
        let client = http_client(cfg.request_timeout)?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &MllmClientConfig {
        &self.cfg
    }
}

impl CompletionBackend for HttpMllmClient {
    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, TextGenError> {
        let key = api_key(&self.cfg.api_key_env)?;
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = request_body(bundle, &self.cfg);
        let (resp, retries) = post_json_with_retry(&self.client, &url, &key, &body, &self.cfg.retry)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .filter(|t| !t.trim().is_empty())
            .ok_or(TextGenError::EmptyCompletion)?
            .to_string();
        let usage = resp.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok()).unwrap_or_default();
        Ok(Completion { text, usage, retries })
    }
}

/// One completion for `bundle`.
pub fn generate(bundle: &PromptBundle, backend: &dyn CompletionBackend) -> Result<Completion, TextGenError> {
    backend.complete(bundle)
}
