//! Versioned prompt templates.
//!
//! Template files live in `templates/` as plain text. An optional first line
//! `#! version: N` sets the version; slots are written `{{name}}`. Rendering
//! appends a trailer line naming the template and version.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    SoapExtract,
    AbductiveRefine,
    DeductiveAnalyze,
    ThoughtCot,
    AnnotatePri,
    AnnotatePost,
    DiseaseMatch,
}

impl TemplateName {
    pub const ALL: [TemplateName; 7] = [
        TemplateName::SoapExtract,
        TemplateName::AbductiveRefine,
        TemplateName::DeductiveAnalyze,
        TemplateName::ThoughtCot,
        TemplateName::AnnotatePri,
        TemplateName::AnnotatePost,
        TemplateName::DiseaseMatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::SoapExtract => "soap_extract",
            TemplateName::AbductiveRefine => "abductive_refine",
            TemplateName::DeductiveAnalyze => "deductive_analyze",
            TemplateName::ThoughtCot => "thought_cot",
            TemplateName::AnnotatePri => "annotate_pri",
            TemplateName::AnnotatePost => "annotate_post",
            TemplateName::DiseaseMatch => "disease_match",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateName::SoapExtract => include_str!("../../templates/soap_extract.txt"),
            TemplateName::AbductiveRefine => include_str!("../../templates/abductive_refine.txt"),
            TemplateName::DeductiveAnalyze => include_str!("../../templates/deductive_analyze.txt"),
            TemplateName::ThoughtCot => include_str!("../../templates/thought_cot.txt"),
            TemplateName::AnnotatePri => include_str!("../../templates/annotate_pri.txt"),
            TemplateName::AnnotatePost => include_str!("../../templates/annotate_post.txt"),
            TemplateName::DiseaseMatch => include_str!("../../templates/disease_match.txt"),
        }
    }

    /// Template named by the trailer line of a rendered prompt.
    pub fn from_trailer(prompt: &str) -> Option<Self> {
        let last = prompt.trim_end().lines().last()?;
        let inner = last.strip_prefix("[template: ")?.strip_suffix(']')?;
        let (name, _) = inner.split_once(' ')?;
        Self::parse(name)
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("{template}: unbound slot(s): {}", .slots.join(", "))]
    Unbound { template: TemplateName, slots: Vec<String> },
    #[error("{template}: unknown slot(s): {}", .slots.join(", "))]
    Unknown { template: TemplateName, slots: Vec<String> },
    #[error("{0}")]
    Load(String),
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_][a-z0-9_]*)\}\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub version: u32,
    body: String,
    slots: Vec<String>,
}

/// A rendered prompt together with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template: TemplateName,
    pub version: u32,
    pub slots: BTreeMap<String, String>,
    pub text: String,
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, source: &str) -> Result<Self, RenderError> {
        let source = source.replace("\r\n", "\n");
        let (version, body) = match source.split_once('\n') {
            Some((first, rest)) if first.starts_with("#!") => {
                let v = first
                    .trim_start_matches("#!")
                    .trim()
                    .strip_prefix("version:")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| RenderError::Load(format!("{name}: bad header line '{first}'")))?;
                (v, rest.to_string())
            }
            _ => (1, source.clone()),
        };
        let mut slots: Vec<String> = Vec::new();
        for cap in slot_re().captures_iter(&body) {
            let s = cap[1].to_string();
            if !slots.contains(&s) {
                slots.push(s);
            }
        }
        Ok(Self { name, version, body: body.trim_end().to_string(), slots })
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn render<K: AsRef<str>, V: AsRef<str>>(&self, bindings: &[(K, V)]) -> Result<Prompt, RenderError> {
        let bound: BTreeMap<String, String> =
            bindings.iter().map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string())).collect();
        let unknown: Vec<String> = bound.keys().filter(|k| !self.slots.contains(k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(RenderError::Unknown { template: self.name, slots: unknown });
        }
        let unbound: Vec<String> = self.slots.iter().filter(|s| !bound.contains_key(*s)).cloned().collect();
        if !unbound.is_empty() {
            return Err(RenderError::Unbound { template: self.name, slots: unbound });
        }
        let text = slot_re().replace_all(&self.body, |c: &regex::Captures<'_>| bound[&c[1]].clone());
        let text = format!("{}\n\n[template: {} v{}]", text, self.name, self.version);
        Ok(Prompt { template: self.name, version: self.version, slots: bound, text })
    }
}

/// The set of templates used by the pipeline.
#[derive(Debug, Clone)]
pub struct TemplateCatalog {
    templates: HashMap<TemplateName, PromptTemplate>,
}

impl TemplateCatalog {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| (n, PromptTemplate::parse(n, n.builtin_source()).expect("builtin template parses")))
            .collect();
        Self { templates }
    }

    /// Built-in templates, replaced by any `<name>.txt` present in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, RenderError> {
        let mut cat = Self::builtin();
        for n in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", n.as_str()));
            if path.exists() {
                let src = std::fs::read_to_string(&path).map_err(|e| RenderError::Load(e.to_string()))?;
                cat.templates.insert(n, PromptTemplate::parse(n, &src)?);
            }
        }
        Ok(cat)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn render<K: AsRef<str>, V: AsRef<str>>(
        &self,
        name: TemplateName,
        bindings: &[(K, V)],
    ) -> Result<Prompt, RenderError> {
        self.get(name).render(bindings)
    }

    /// Re-renders a recorded prompt; used to check reproducibility of traces.
    pub fn rerender(&self, prompt: &Prompt) -> Result<Prompt, RenderError> {
        let t = self.get(prompt.template);
        if t.version != prompt.version {
            return Err(RenderError::Load(format!(
                "{} is at v{}, prompt was rendered with v{}",
                t.name, t.version, prompt.version
            )));
        }
        let b: Vec<(&String, &String)> = prompt.slots.iter().collect();
        t.render(&b)
    }
}

impl Default for TemplateCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}
