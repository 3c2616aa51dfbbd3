//! Chat-completion backends and the prompt template catalog.

mod config;
mod mock;
mod remote;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_backend, BackendConfig, ConfigError, MockConfig, RemoteConfig};
pub use mock::{FnBackend, MockBackend, MockFixture};
pub use remote::RemoteBackend;
pub use template::{Prompt, PromptTemplate, RenderError, TemplateCatalog, TemplateName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, seed: None }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("no mock fixture for prompt hash {0}")]
    MissingFixture(String),
    #[error("{0}")]
    Other(String),
}

/// A text-completion service. Implementations must be shareable across threads.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Line endings unified to `\n`, trailing whitespace stripped from every line and from the end.
pub fn normalize_prompt(prompt: &str) -> String {
    let unified = prompt.replace("\r\n", "\n");
    let lines: Vec<&str> = unified.split('\n').map(str::trim_end).collect();
    lines.join("\n").trim_end().to_string()
}

/// SHA-256 of the normalized prompt, hex encoded. Mock fixtures are keyed by it.
pub fn prompt_hash(prompt: &str) -> String {
    crate::text::sha256_hex(normalize_prompt(prompt).as_bytes())
}
