//! Preference ranking of refined diseases and thought-process generation.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abductive::RefinedList;
use crate::deductive::{DiagnosisMemory, Status, UNADDRESSED};
use crate::dialogue::DialogueHistory;
use crate::encoder::RankerModel;
use crate::kb::KnowledgeBase;
use crate::llm::{CompletionParams, LlmBackend, LlmError, Prompt, RenderError, TemplateCatalog, TemplateName};
use crate::retrieval::{by_score_then_id, ScoredDisease};

pub const DEFAULT_TOP_K: usize = 5;
pub const RESPONSE_MARKER: &str = "Therefore, the doctor responds";

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error("template error: {0}")]
    Template(#[from] RenderError),
    #[error("thought process has no \"{RESPONSE_MARKER}\" marker")]
    MissingMarker,
    #[error("thought process has no numbered steps")]
    NoSteps,
    #[error("empty response after marker")]
    EmptyResponse,
    #[error("exemplars: {0}")]
    Exemplars(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityRanking {
    pub ranked: Vec<ScoredDisease>,
    pub k_prime_prime: usize,
}

impl PriorityRanking {
    /// The first K'' entries.
    pub fn top(&self) -> &[ScoredDisease] {
        &self.ranked[..self.k_prime_prime.min(self.ranked.len())]
    }

    pub fn top_ids(&self) -> Vec<String> {
        self.top().iter().map(|s| s.id.clone()).collect()
    }
}

/// Orders already-scored diseases: descending score, ascending id on ties.
pub fn order_scores(mut scored: Vec<ScoredDisease>, k_prime_prime: usize) -> PriorityRanking {
    scored.sort_by(by_score_then_id);
    PriorityRanking { ranked: scored, k_prime_prime }
}

/// Scores each refined disease against the dialogue history and sorts.
pub fn rank(
    ranker: &RankerModel,
    history: &DialogueHistory,
    refined: &RefinedList,
    kb: &KnowledgeBase,
    k_prime_prime: usize,
) -> PriorityRanking {
    let text = history.render();
    let scored = refined
        .diseases
        .iter()
        .map(|id| ScoredDisease { id: id.clone(), score: ranker.score(&text, kb.name_of(id)) })
        .collect();
    order_scores(scored, k_prime_prime)
}

/// Few-shot thought-process exemplars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplars(pub Vec<String>);

impl Exemplars {
    pub fn builtin() -> Self {
        Self(vec![
            include_str!("../exemplars/exemplar_1.txt").trim_end().to_string(),
            include_str!("../exemplars/exemplar_2.txt").trim_end().to_string(),
            include_str!("../exemplars/exemplar_3.txt").trim_end().to_string(),
        ])
    }

    /// Loads every `exemplar_*.txt` in `dir`, in file-name order; `expected` is the required count.
    pub fn from_dir(dir: &Path, expected: usize) -> Result<Self, AlignmentError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| AlignmentError::Exemplars(e.to_string()))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("exemplar_") && n.ends_with(".txt"))
            })
            .collect();
        paths.sort();
        if paths.len() != expected {
            return Err(AlignmentError::Exemplars(format!("expected {expected} exemplars, found {}", paths.len())));
        }
        let texts = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map(|s| s.trim_end().to_string()))
            .collect::<Result<_, _>>()
            .map_err(|e| AlignmentError::Exemplars(e.to_string()))?;
        Ok(Self(texts))
    }

    pub fn render(&self) -> String {
        self.0.iter().enumerate().map(|(i, e)| format!("Example {}:\n{}", i + 1, e)).collect::<Vec<_>>().join("\n\n")
    }
}

impl Default for Exemplars {
    fn default() -> Self {
        Self::builtin()
    }
}

fn memory_digest(memory: &DiagnosisMemory, kb: &KnowledgeBase) -> String {
    if memory.is_empty() {
        return "none recorded".into();
    }
    let lines: Vec<String> = memory
        .entries()
        .iter()
        .filter(|e| e.status != Status::Irrelevant)
        .map(|e| format!("- turn {}: \"{}\" {}s {}", e.turn, e.finding.text, e.status, kb.name_of(&e.disease)))
        .collect();
    let omitted = memory.len() - lines.len();
    let mut out = if lines.is_empty() { "none recorded".to_string() } else { lines.join("\n") };
    if omitted > 0 {
        out.push_str(&format!("\n({omitted} irrelevant finding-disease pairs omitted)"));
    }
    out
}

fn disease_block(i: usize, d: &ScoredDisease, memory: &DiagnosisMemory, kb: &KnowledgeBase) -> String {
    let mut out = format!("{}. {} [{}]", i + 1, kb.name_of(&d.id), d.id);
    if let Some(doc) = kb.get(&d.id) {
        if !doc.diagnosis_knowledge.is_empty() {
            out.push_str(&format!("\n   knowledge: {}", doc.diagnosis_knowledge));
        }
    }
    let analyses: Vec<String> = memory
        .for_disease(&d.id)
        .filter(|e| e.rationale != UNADDRESSED)
        .map(|e| format!("\n   analysis (turn {}): \"{}\" {}s it: {}", e.turn, e.finding.text, e.status, e.rationale))
        .collect();
    if analyses.is_empty() {
        out.push_str("\n   analysis: none recorded");
    } else {
        out.extend(analyses);
    }
    out
}

/// Renders the inference-time thought prompt: exemplars, history, memory digest,
/// and the top diseases with their analyses.
pub fn build_thought_prompt(
    catalog: &TemplateCatalog,
    history: &DialogueHistory,
    memory: &DiagnosisMemory,
    top: &[ScoredDisease],
    kb: &KnowledgeBase,
    exemplars: &Exemplars,
) -> Result<Prompt, AlignmentError> {
    let diseases = if top.is_empty() {
        "none recorded".to_string()
    } else {
        top.iter().enumerate().map(|(i, d)| disease_block(i, d, memory, kb)).collect::<Vec<_>>().join("\n")
    };
    let context = format!(
        "Diagnosis memory:\n{}\n\nDiseases the next response will discuss:\n{}",
        memory_digest(memory, kb),
        diseases
    );
    Ok(catalog.render(
        TemplateName::ThoughtCot,
        &[("exemplars", exemplars.render()), ("history", history.render()), ("context", context)],
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtProcess {
    pub steps: Vec<String>,
    pub response: String,
    pub raw: String,
}

fn numbered(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')).map(str::trim)
}

fn find_last_marker(raw: &str) -> Option<usize> {
    let lower = raw.to_lowercase();
    let needle = RESPONSE_MARKER.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; only trust the index when it maps back.
    lower
        .rmatch_indices(&needle)
        .map(|(i, _)| i)
        .find(|&i| raw.get(i..i + needle.len()).is_some_and(|s| s.eq_ignore_ascii_case(&needle)))
}

fn quoted_response(after: &str) -> Option<String> {
    let rest = after.trim_start_matches(|c: char| c == ',' || c == ':' || c == '，' || c == '：' || c.is_whitespace());
    let mut chars = rest.chars();
    let open = chars.next()?;
    let close = match open {
        '"' => Some('"'),
        '“' => Some('”'),
        '「' => Some('」'),
        '\'' => Some('\''),
        _ => None,
    };
    let text = match close {
        Some(c) => {
            let body = &rest[open.len_utf8()..];
            match body.find(c) {
                Some(end) => &body[..end],
                None => body.lines().next().unwrap_or(""),
            }
        }
        None => rest.lines().next().unwrap_or(""),
    };
    let text = text.trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Splits a thought process into numbered steps and the quoted response after the
/// last marker phrase. Unnumbered lines continue the preceding step.
pub fn parse_thought(raw: &str) -> Result<ThoughtProcess, AlignmentError> {
    let at = find_last_marker(raw).ok_or(AlignmentError::MissingMarker)?;
    let (before, after) = raw.split_at(at);
    let mut steps: Vec<String> = Vec::new();
    for line in before.lines() {
        if let Some(text) = numbered(line) {
            steps.push(text.to_string());
        } else if let Some(last) = steps.last_mut() {
            let t = line.trim();
            if !t.is_empty() {
                if !last.is_empty() {
                    last.push(' ');
                }
                last.push_str(t);
            }
        }
    }
    steps.retain(|s| !s.is_empty());
    if steps.is_empty() {
        return Err(AlignmentError::NoSteps);
    }
    let response = quoted_response(&after[RESPONSE_MARKER.len()..]).ok_or(AlignmentError::EmptyResponse)?;
    Ok(ThoughtProcess { steps, response, raw: raw.to_string() })
}

impl ThoughtProcess {
    /// Canonical text form; `parse_thought(&t.to_raw())` yields the same steps and response.
    pub fn to_raw(&self) -> String {
        let mut out: String = self.steps.iter().enumerate().map(|(i, s)| format!("{}. {}\n", i + 1, s)).collect();
        out.push_str(&format!("{RESPONSE_MARKER}, \"{}\"", self.response));
        out
    }
}

/// Samples a thought process from the backend and parses it.
pub fn generate_thought(
    backend: &dyn LlmBackend,
    params: &CompletionParams,
    prompt: &Prompt,
) -> Result<ThoughtProcess, AlignmentError> {
    let raw = backend.complete(&prompt.text, params)?;
    parse_thought(&raw)
}

/// |A ∩ B| / |A ∪ B|; two empty sets count as full agreement (1.0).
pub fn iou<S: AsRef<str>, T: AsRef<str>>(predicted: &[S], gold: &[T]) -> f64 {
    let a: HashSet<&str> = predicted.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
