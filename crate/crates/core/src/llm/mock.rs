//! Deterministic in-process backends.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, CompletionParams, LlmBackend, LlmError, TemplateName};

/// One line of a mock fixture file. Either `prompt_hash` or `template` selects the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub response: String,
}

/// Answers from a fixture table.
///
/// Lookup order: exact prompt hash, then the template the prompt was rendered
/// from (read from its trailer line), then the registered default.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    by_hash: HashMap<String, String>,
    by_template: HashMap<String, String>,
    default: Option<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.by_hash.insert(prompt_hash(prompt), response.into());
        self
    }

    pub fn with_hash(mut self, hash: impl Into<String>, response: impl Into<String>) -> Self {
        self.by_hash.insert(hash.into(), response.into());
        self
    }

    pub fn with_template(mut self, template: TemplateName, response: impl Into<String>) -> Self {
        self.by_template.insert(template.as_str().to_string(), response.into());
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    pub fn add(&mut self, fixture: MockFixture) -> Result<(), String> {
        match (fixture.prompt_hash, fixture.template) {
            (Some(h), None) => {
                self.by_hash.insert(h, fixture.response);
            }
            (None, Some(t)) => {
                TemplateName::parse(&t).ok_or_else(|| format!("unknown template '{t}'"))?;
                self.by_template.insert(t, fixture.response);
            }
            _ => return Err("fixture needs exactly one of prompt_hash or template".into()),
        }
        Ok(())
    }

    /// Reads JSONL fixtures.
    pub fn load_fixtures<R: BufRead>(mut self, reader: R) -> Result<Self, String> {
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let f: MockFixture = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            self.add(f).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(self)
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let hash = prompt_hash(prompt);
        if let Some(r) = self.by_hash.get(&hash) {
            return Ok(r.clone());
        }
        if let Some(r) = TemplateName::from_trailer(prompt).and_then(|t| self.by_template.get(t.as_str())) {
            return Ok(r.clone());
        }
        self.default.clone().ok_or(LlmError::MissingFixture(hash))
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Backend driven by a closure; convenient for scripted tests and fault injection.
pub struct FnBackend<F>(pub F);

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&str) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        (self.0)(prompt)
    }

    fn name(&self) -> &str {
        "fn"
    }
}
