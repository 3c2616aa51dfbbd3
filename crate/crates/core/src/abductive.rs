//! Abductive reasoning: SOAP finding extraction and vote-based diagnosis refinement.
//!
//! Refinement splits the retrieved candidates into `B` independent random
//! partitions ("batch groups") of `G` candidates per batch. Every batch is
//! shown to the backend, which selects the candidates that explain the new
//! findings. A group's selection is the union over its batches, and a
//! candidate's vote is the number of groups that selected it. Candidates
//! with a vote strictly greater than `B/2` survive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::KnowledgeBase;
use crate::llm::{CompletionParams, LlmBackend, LlmError, RenderError, TemplateCatalog, TemplateName};
use crate::text::normalize;

pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_GROUPS: usize = 5;
pub const DEFAULT_PAST_FINDINGS_BUDGET: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Soap {
    #[serde(rename = "S")]
    Subjective,
    #[serde(rename = "O")]
    Objective,
    #[serde(rename = "A")]
    Assessment,
    #[serde(rename = "P")]
    Plan,
}

impl Soap {
    pub const ALL: [Soap; 4] = [Soap::Subjective, Soap::Objective, Soap::Assessment, Soap::Plan];

    pub fn tag(self) -> &'static str {
        match self {
            Soap::Subjective => "S",
            Soap::Objective => "O",
            Soap::Assessment => "A",
            Soap::Plan => "P",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "subjective" => Some(Soap::Subjective),
            "o" | "objective" => Some(Soap::Objective),
            "a" | "assessment" => Some(Soap::Assessment),
            "p" | "plan" => Some(Soap::Plan),
            _ => None,
        }
    }
}

impl fmt::Display for Soap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub text: String,
    pub soap: Soap,
    pub turn: usize,
}

/// Findings of one turn, deduplicated by normalized text.
pub type FindingSet = Vec<Finding>;

#[derive(Debug, Error)]
pub enum AbductiveError {
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error("template error: {0}")]
    Template(#[from] RenderError),
    #[error("findings output, line {line}: not a SOAP finding: {text:?}")]
    SoapGrammar { line: usize, text: String },
    #[error("findings output contains no findings")]
    NoFindings,
    #[error("patient utterance is empty")]
    EmptyUtterance,
    #[error("invalid plan parameters: {0}")]
    InvalidPlan(String),
    #[error("candidate '{0}' is not in the knowledge base")]
    UnknownCandidate(String),
}

fn soap_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*•]\s*)?(?i:(subjective|objective|assessment|plan|s|o|a|p))\s*[:：]\s*(.*?)\s*$")
            .expect("valid regex")
    })
}

/// Parses backend output of the form `S: phrase` per line. Phrases separated by
/// `;` on one line become separate findings; repeated phrases are kept once.
pub fn parse_findings(output: &str, turn: usize) -> Result<FindingSet, AbductiveError> {
    let mut out: FindingSet = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in output.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let caps = soap_line_re()
            .captures(line)
            .ok_or_else(|| AbductiveError::SoapGrammar { line: i + 1, text: line.to_string() })?;
        let soap = Soap::parse(&caps[1]).expect("regex restricts tags");
        for phrase in caps[2].split(';').map(str::trim).filter(|p| !p.is_empty()) {
            if seen.insert(normalize(phrase)) {
                out.push(Finding { text: phrase.to_string(), soap, turn });
            }
        }
    }
    if out.is_empty() {
        return Err(AbductiveError::NoFindings);
    }
    Ok(out)
}

/// Asks the backend for the SOAP findings of the latest exchange.
/// On the first turn there is no previous doctor utterance and it is left out of the prompt.
pub fn extract_findings(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    previous_doctor: Option<&str>,
    patient: &str,
    turn: usize,
) -> Result<FindingSet, AbductiveError> {
    if patient.trim().is_empty() {
        return Err(AbductiveError::EmptyUtterance);
    }
    let mut recent = String::new();
    if let Some(d) = previous_doctor {
        recent.push_str(&format!("Doctor: {d}\n"));
    }
    recent.push_str(&format!("Patient: {patient}"));
    let prompt = catalog.render(TemplateName::SoapExtract, &[("recent_dialogue", recent)])?;
    let output = backend.complete(&prompt.text, params)?;
    parse_findings(&output, turn)
}

/// `B` random partitions of the candidate list into batches of `G`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchGroupPlan {
    pub seed: u64,
    pub batch_size: usize,
    /// Candidates in retrieval order.
    pub candidates: Vec<String>,
    /// `groups[j][b]` is batch `b` of group `j`.
    pub groups: Vec<Vec<Vec<String>>>,
    group_count: usize,
}

impl BatchGroupPlan {
    pub fn group_count(&self) -> usize {
        self.group_count
    }
}

/// Builds `groups` independent shuffles of `candidates`, each cut into batches of
/// `batch_size`. The last batch of a group is short when the sizes do not divide.
pub fn plan_batch_groups(
    candidates: &[String],
    batch_size: usize,
    groups: usize,
    seed: u64,
) -> Result<BatchGroupPlan, AbductiveError> {
    if batch_size == 0 {
        return Err(AbductiveError::InvalidPlan("batch size must be at least 1".into()));
    }
    if groups == 0 {
        return Err(AbductiveError::InvalidPlan("group count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan_groups = (0..groups)
        .map(|_| {
            let mut order = candidates.to_vec();
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(<[String]>::to_vec).collect()
        })
        .collect();
    Ok(BatchGroupPlan { seed, batch_size, candidates: candidates.to_vec(), groups: plan_groups, group_count: groups })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    /// Every candidate with its vote count.
    pub votes: BTreeMap<String, usize>,
    #[serde(rename = "B")]
    pub groups: usize,
}

impl VoteTally {
    /// Strict majority: `v > B/2`.
    pub fn passes(&self, votes: usize) -> bool {
        2 * votes > self.groups
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedList {
    /// Surviving candidates, in retrieval order.
    pub diseases: Vec<String>,
}

impl RefinedList {
    pub fn len(&self) -> usize {
        self.diseases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diseases.is_empty()
    }
}

/// What the backend picked for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSelection {
    pub group: usize,
    pub batch: usize,
    pub selected: Vec<String>,
    /// Ids named by the backend that were not part of the batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discarded: Vec<String>,
}

/// Result of one refinement, serialized as the refinement trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub plan_seed: u64,
    #[serde(rename = "B")]
    pub groups: usize,
    #[serde(rename = "G")]
    pub batch_size: usize,
    pub per_batch_selections: Vec<BatchSelection>,
    pub votes: VoteTally,
    pub refined: RefinedList,
    /// Explanations given for each selected disease, in batch order.
    pub explanations: BTreeMap<String, Vec<String>>,
}

/// Counts votes from per-batch selections and applies the strict-majority rule.
pub fn tally(plan: &BatchGroupPlan, selections: &[BatchSelection]) -> (VoteTally, RefinedList) {
    let mut per_group: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); plan.group_count];
    for s in selections {
        per_group[s.group].extend(s.selected.iter().map(String::as_str));
    }
    let mut votes: BTreeMap<String, usize> = plan.candidates.iter().map(|c| (c.clone(), 0)).collect();
    for group in &per_group {
        for id in group {
            if let Some(v) = votes.get_mut(*id) {
                *v += 1;
            }
        }
    }
    let tally = VoteTally { votes, groups: plan.group_count };
    let refined =
        RefinedList { diseases: plan.candidates.iter().filter(|c| tally.passes(tally.votes[*c])).cloned().collect() };
    (tally, refined)
}

fn selection_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*]\s*)?(?i:disease)\s*:\s*([^|]+?)\s*(?:\|\s*(?i:explanation)\s*:\s*(.*?))?\s*$")
            .expect("valid regex")
    })
}

/// Parses `disease: <id> | explanation: ...` lines. Lines of any other shape are ignored.
pub fn parse_selection(output: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in output.lines() {
        if let Some(c) = selection_re().captures(line) {
            let id = c[1].trim().trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if id.is_empty() || id.eq_ignore_ascii_case("none") || out.iter().any(|(i, _)| *i == id) {
                continue;
            }
            let why = c.get(2).map(|m| m.as_str().to_string()).unwrap_or_default();
            out.push((id, why));
        }
    }
    out
}

pub(crate) fn render_findings(findings: &[Finding]) -> String {
    if findings.is_empty() {
        return "none recorded".into();
    }
    findings.iter().map(|f| format!("- [{}] {}", f.soap, f.text)).collect::<Vec<_>>().join("\n")
}

/// Most recent past findings whose rendering fits in `budget` characters.
fn render_past(past: &[Finding], budget: usize) -> String {
    let mut kept: Vec<String> = Vec::new();
    let mut used = 0;
    for f in past.iter().rev() {
        let line = format!("- [{}] {}", f.soap, f.text);
        if used + line.len() + 1 > budget {
            break;
        }
        used += line.len() + 1;
        kept.push(line);
    }
    if kept.is_empty() {
        return "none recorded".into();
    }
    kept.reverse();
    kept.join("\n")
}

pub(crate) fn knowledge_line(kb: &KnowledgeBase, id: &str) -> String {
    match kb.get(id) {
        Some(d) => {
            let k = if d.diagnosis_knowledge.is_empty() { &d.description } else { &d.diagnosis_knowledge };
            format!("[{}] {}: {}", d.id, d.name, k)
        }
        None => format!("[{id}]"),
    }
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub past_findings_budget: usize,
    /// Issue batch prompts from parallel threads.
    pub parallel: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { past_findings_budget: DEFAULT_PAST_FINDINGS_BUDGET, parallel: true }
    }
}

/// Runs every batch of `plan` through the backend and tallies the votes.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    findings: &[Finding],
    past_findings: &[Finding],
    plan: &BatchGroupPlan,
    kb: &KnowledgeBase,
    options: &RefineOptions,
) -> Result<Refinement, AbductiveError> {
    if let Some(c) = plan.candidates.iter().find(|c| !kb.contains(c)) {
        return Err(AbductiveError::UnknownCandidate(c.clone()));
    }
    let new_findings = render_findings(findings);
    let past = render_past(past_findings, options.past_findings_budget);
    let jobs: Vec<(usize, usize, &Vec<String>)> = plan
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, batches)| batches.iter().enumerate().map(move |(b, batch)| (g, b, batch)))
        .collect();

    let run = |batch: &Vec<String>| -> Result<String, AbductiveError> {
        let candidates = batch.iter().map(|id| knowledge_line(kb, id)).collect::<Vec<_>>().join("\n");
        let prompt = catalog.render(
            TemplateName::AbductiveRefine,
            &[("past_findings", past.as_str()), ("new_findings", &new_findings), ("candidates", &candidates)],
        )?;
        Ok(backend.complete(&prompt.text, params)?)
    };
    let outputs: Vec<Result<String, AbductiveError>> = if options.parallel && jobs.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|(_, _, batch)| s.spawn(|| run(batch))).collect();
            handles.into_iter().map(|h| h.join().expect("refine worker panicked")).collect()
        })
    } else {
        jobs.iter().map(|(_, _, batch)| run(batch)).collect()
    };

    let mut selections = Vec::with_capacity(jobs.len());
    let mut explanations: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ((group, batch_idx, batch), output) in jobs.iter().zip(outputs) {
        let output = output?;
        let mut selected = Vec::new();
        let mut discarded = Vec::new();
        for (id, why) in parse_selection(&output) {
            if batch.contains(&id) {
                if !why.is_empty() {
                    explanations.entry(id.clone()).or_default().push(why);
                }
                selected.push(id);
            } else {
                tracing::warn!(group, batch = batch_idx, id = %id, "selection outside batch discarded");
                discarded.push(id);
            }
        }
        selections.push(BatchSelection { group: *group, batch: *batch_idx, selected, discarded });
    }
    let (votes, refined) = tally(plan, &selections);
    Ok(Refinement {
        plan_seed: plan.seed,
        groups: plan.group_count,
        batch_size: plan.batch_size,
        per_batch_selections: selections,
        votes,
        refined,
        explanations,
    })
}
