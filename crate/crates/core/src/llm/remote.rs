//! HTTP client for chat-completions compatible endpoints.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{CompletionParams, LlmBackend, LlmError, RemoteConfig};

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Limiter,
    last_start: Mutex<Option<Instant>>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, LlmError> {
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let limiter = Limiter::new(config.max_concurrency);
        Ok(Self { config, api_key, client, limiter, last_start: Mutex::new(None) })
    }

    fn pace(&self) {
        if self.config.min_interval_ms == 0 {
            return;
        }
        let gap = Duration::from_millis(self.config.min_interval_ms);
        let mut last = self.last_start.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < gap {
                thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn body(&self, prompt: &str, params: &CompletionParams) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp =
            req.send().map_err(
                |e| {
                    if e.is_timeout() {
                        LlmError::Timeout
                    } else {
                        LlmError::Transport(e.to_string())
                    }
                },
            )?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Http { status: status.as_u16(), body: text });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout | LlmError::Transport(_) => true,
        LlmError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let body = self.body(prompt, params);
        let _permit = self.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            self.pace();
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) && attempt < self.config.max_retries => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %e, "retrying completion");
                    thread::sleep(Duration::from_millis(100 * 2u64.pow(attempt.min(6))));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn name(&self) -> &str {
        &self.config.model
    }
}
