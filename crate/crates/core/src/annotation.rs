//! Corpus construction: disease annotation with and without the doctor's reply,
//! linking free-text mentions to the knowledge base, and thought extraction.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{parse_thought, AlignmentError, Exemplars, ThoughtProcess};
use crate::dialogue::{DialogueHistory, DialogueTurn};
use crate::encoder::EncoderModel;
use crate::kb::KnowledgeBase;
use crate::llm::{CompletionParams, LlmBackend, LlmError, RenderError, TemplateCatalog, TemplateName};
use crate::retrieval::retrieve_top_k;
use crate::text::{normalize, tokenize};

/// Size of the coarse candidate list shown to the match prompt.
pub const LINK_CANDIDATES: usize = 10;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error("template error: {0}")]
    Template(#[from] RenderError),
    #[error("dialogue history is empty")]
    EmptyHistory,
    #[error("doctor response is empty")]
    EmptyResponse,
    #[error("mention is empty")]
    EmptyMention,
    #[error("no numbered disease list in output: {0:?}")]
    Unparseable(String),
    #[error("thought extraction: {0}")]
    Thought(#[from] AlignmentError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub name: String,
    pub reason: String,
}

fn item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)(?:^|\s)(\d+)[.)]\s+").expect("valid regex"))
}

fn split_mention(item: &str) -> Mention {
    let item = item.trim();
    let cut = item
        .char_indices()
        .find(|(_, c)| matches!(c, ':' | '：'))
        .map(|(i, c)| (i, c.len_utf8()))
        .or_else(|| item.find(" - ").map(|i| (i, 3)));
    let (name, reason) = match cut {
        Some((i, len)) => (&item[..i], item[i + len..].trim()),
        None => (item, ""),
    };
    let name = name.trim().trim_matches(|c: char| c == '*' || c == '"').trim().trim_end_matches(['.', ',', ';']);
    Mention { name: name.to_string(), reason: reason.split_whitespace().collect::<Vec<_>>().join(" ") }
}

/// Parses a numbered list (`1. name: reason`), on separate lines or run together on one.
/// Item numbers must count up from 1; a repeated disease keeps its first rank.
pub fn parse_mentions(output: &str) -> Result<Vec<Mention>, AnnotationError> {
    let mut starts: Vec<(usize, usize)> = Vec::new();
    let mut expected = 1;
    for c in item_re().captures_iter(output) {
        if c[1].parse::<usize>().ok() == Some(expected) {
            let m = c.get(0).expect("whole match");
            starts.push((m.start(), m.end()));
            expected += 1;
        }
    }
    let mut out: Vec<Mention> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, &(_, body)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(output.len(), |&(s, _)| s);
        let m = split_mention(&output[body..end]);
        if !m.name.is_empty() && seen.insert(normalize(&m.name)) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(AnnotationError::Unparseable(output.chars().take(200).collect()));
    }
    Ok(out)
}

/// Diseases the patient may have, judged from the history alone.
pub fn annotate_pri(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    history: &DialogueHistory,
) -> Result<Vec<Mention>, AnnotationError> {
    if history.is_empty() {
        return Err(AnnotationError::EmptyHistory);
    }
    let prompt = catalog.render(TemplateName::AnnotatePri, &[("history", history.render())])?;
    parse_mentions(&backend.complete(&prompt.text, params)?)
}

/// Diseases the doctor's reply is addressing, judged with the reply in view.
pub fn annotate_post(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    history: &DialogueHistory,
    response: &str,
) -> Result<Vec<Mention>, AnnotationError> {
    if history.is_empty() {
        return Err(AnnotationError::EmptyHistory);
    }
    if response.trim().is_empty() {
        return Err(AnnotationError::EmptyResponse);
    }
    let prompt = catalog
        .render(TemplateName::AnnotatePost, &[("history", history.render()), ("response", response.to_string())])?;
    parse_mentions(&backend.complete(&prompt.text, params)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mention: String,
    pub id: Option<String>,
    /// Coarse candidate ids, best first.
    pub candidates: Vec<String>,
    /// Further in-list matches the backend named after the first.
    pub extras: Vec<String>,
    /// Why the mention stayed unlinked.
    pub reason: Option<String>,
}

fn match_ids(output: &str) -> Vec<String> {
    output
        .lines()
        .filter_map(|l| {
            let l = l.trim().trim_start_matches(['-', '*']).trim();
            let (key, value) = l.split_once(':')?;
            key.trim()
                .eq_ignore_ascii_case("match")
                .then(|| value.trim().trim_start_matches('[').trim_end_matches(']').trim().to_string())
        })
        .filter(|id| !id.is_empty())
        .collect()
}

/// Links a free-text disease mention to a knowledge-base id: coarse top-10 by
/// relevance, then the backend picks from that list. Never returns an id outside it.
pub fn link(
    mention: &str,
    model: &EncoderModel,
    kb: &KnowledgeBase,
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
) -> Result<LinkResult, AnnotationError> {
    if mention.trim().is_empty() {
        return Err(AnnotationError::EmptyMention);
    }
    let candidates = retrieve_top_k(model, kb, mention, LINK_CANDIDATES).ids();
    let unlinked = |reason: String| LinkResult {
        mention: mention.to_string(),
        id: None,
        candidates: candidates.clone(),
        extras: vec![],
        reason: Some(reason),
    };
    if candidates.is_empty() {
        return Ok(unlinked("knowledge base is empty".into()));
    }
    let listing = candidates
        .iter()
        .map(|id| {
            let d = kb.get(id).expect("retrieved from kb");
            if d.aliases.is_empty() {
                format!("[{}] {}", d.id, d.name)
            } else {
                format!("[{}] {} (also: {})", d.id, d.name, d.aliases.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let prompt =
        catalog.render(TemplateName::DiseaseMatch, &[("target", mention.to_string()), ("candidates", listing)])?;
    let output = match backend.complete(&prompt.text, params) {
        Ok(o) => o,
        Err(e) => return Ok(unlinked(format!("backend failure: {e}"))),
    };
    let picked = match_ids(&output);
    let mut in_list = picked.iter().filter(|id| candidates.contains(id));
    let Some(first) = in_list.next() else {
        let reason = if picked.is_empty() {
            "no match".to_string()
        } else {
            format!("selection outside candidates: {}", picked.join(", "))
        };
        return Ok(unlinked(reason));
    };
    let extras: Vec<String> = in_list.filter(|id| *id != first).cloned().collect();
    if !extras.is_empty() {
        tracing::debug!(mention, chosen = %first, ?extras, "match prompt returned several diseases; keeping the first");
    }
    Ok(LinkResult { mention: mention.to_string(), id: Some(first.clone()), candidates, extras, reason: None })
}

/// Thought process explaining a known doctor reply.
pub fn extract_thought(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    history: &DialogueHistory,
    gold_response: &str,
    exemplars: &Exemplars,
) -> Result<ThoughtProcess, AnnotationError> {
    if gold_response.trim().is_empty() {
        return Err(AnnotationError::EmptyResponse);
    }
    let prompt = catalog.render(
        TemplateName::ThoughtCot,
        &[
            ("exemplars", exemplars.render()),
            ("history", history.render()),
            ("context", format!("The doctor actually replied:\n{gold_response}")),
        ],
    )?;
    Ok(parse_thought(&backend.complete(&prompt.text, params)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedDisease {
    pub id: String,
    pub pri: bool,
    pub post: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDiseaseAnnotation {
    pub turn: usize,
    pub e_pri: Vec<String>,
    pub e_post: Vec<String>,
    pub e_merged: Vec<MergedDisease>,
}

impl TurnDiseaseAnnotation {
    /// E_t: `e_post` in its own order, then the rest of `e_pri` in its order.
    pub fn merge(turn: usize, e_pri: Vec<String>, e_post: Vec<String>) -> Self {
        let mut e_merged: Vec<MergedDisease> = Vec::new();
        for id in &e_post {
            if !e_merged.iter().any(|m| &m.id == id) {
                e_merged.push(MergedDisease { id: id.clone(), pri: e_pri.contains(id), post: true });
            }
        }
        for id in &e_pri {
            if !e_merged.iter().any(|m| &m.id == id) {
                e_merged.push(MergedDisease { id: id.clone(), pri: true, post: false });
            }
        }
        Self { turn, e_pri, e_post, e_merged }
    }

    pub fn merged_ids(&self) -> Vec<String> {
        self.e_merged.iter().map(|m| m.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtRecord {
    pub steps: Vec<String>,
    pub response: String,
}

/// One line of the annotated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub e_pri: Vec<String>,
    pub e_post: Vec<String>,
    pub e_merged: Vec<MergedDisease>,
    pub thought: ThoughtRecord,
    /// Mentions that could not be linked, kept for inspection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlinked: Vec<String>,
}

impl CorpusRecord {
    pub fn annotation(&self) -> TurnDiseaseAnnotation {
        TurnDiseaseAnnotation {
            turn: self.turn,
            e_pri: self.e_pri.clone(),
            e_post: self.e_post.clone(),
            e_merged: self.e_merged.clone(),
        }
    }
}

/// Everything the annotation pipeline needs besides the turn itself.
pub struct Annotator<'a> {
    pub backend: &'a dyn LlmBackend,
    pub catalog: &'a TemplateCatalog,
    pub params: CompletionParams,
    pub linker: &'a EncoderModel,
    pub kb: &'a KnowledgeBase,
    pub exemplars: &'a Exemplars,
}

impl Annotator<'_> {
    fn link_all(&self, mentions: &[Mention], unlinked: &mut Vec<String>) -> Result<Vec<String>, AnnotationError> {
        let mut ids: Vec<String> = Vec::new();
        for m in mentions {
            let r = link(&m.name, self.linker, self.kb, self.backend, self.catalog, &self.params)?;
            match r.id {
                Some(id) if !ids.contains(&id) => ids.push(id),
                Some(_) => {}
                None => unlinked.push(m.name.clone()),
            }
        }
        Ok(ids)
    }

    pub fn annotate_turn(&self, dialogue_id: &str, turn: &DialogueTurn) -> Result<CorpusRecord, AnnotationError> {
        let pri = annotate_pri(self.backend, self.catalog, &self.params, &turn.history)?;
        let post = annotate_post(self.backend, self.catalog, &self.params, &turn.history, &turn.response)?;
        let mut unlinked = Vec::new();
        let e_pri = self.link_all(&pri, &mut unlinked)?;
        let e_post = self.link_all(&post, &mut unlinked)?;
        let thought =
            extract_thought(self.backend, self.catalog, &self.params, &turn.history, &turn.response, self.exemplars)?;
        let ann = TurnDiseaseAnnotation::merge(turn.turn, e_pri, e_post);
        Ok(CorpusRecord {
            dialogue_id: dialogue_id.to_string(),
            turn: turn.turn,
            e_pri: ann.e_pri,
            e_post: ann.e_post,
            e_merged: ann.e_merged,
            thought: ThoughtRecord { steps: thought.steps, response: thought.response },
            unlinked,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_thoughts: usize,
    pub avg_steps: f64,
    pub avg_tokens_per_step: f64,
    /// Step tokens per thought; the response line is not counted.
    pub avg_total_tokens: f64,
}

/// Corpus averages, with tokens counted by [`crate::text::tokenize`].
pub fn stats<'a, I>(thoughts: I) -> CorpusStats
where
    I: IntoIterator<Item = &'a [String]>,
{
    let (mut n, mut steps, mut tokens) = (0usize, 0usize, 0usize);
    for t in thoughts {
        n += 1;
        steps += t.len();
        tokens += t.iter().map(|s| tokenize(s).len()).sum::<usize>();
    }
    if n == 0 {
        return CorpusStats::default();
    }
    CorpusStats {
        n_thoughts: n,
        avg_steps: steps as f64 / n as f64,
        avg_tokens_per_step: if steps == 0 { 0.0 } else { tokens as f64 / steps as f64 },
        avg_total_tokens: tokens as f64 / n as f64,
    }
}
