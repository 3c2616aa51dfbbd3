//! Deductive reasoning: relate every new finding to every refined disease and
//! keep the results in an append-only diagnosis memory.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abductive::{knowledge_line, render_findings, Finding, RefinedList};
use crate::kb::KnowledgeBase;
use crate::llm::{CompletionParams, LlmBackend, LlmError, RenderError, TemplateCatalog, TemplateName};
use crate::text::{normalize, sha256_hex};

/// Rationale recorded for pairs the backend did not address.
pub const UNADDRESSED: &str = "unaddressed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Support,
    Oppose,
    Irrelevant,
}

impl Status {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "support" | "supports" => Some(Status::Support),
            "oppose" | "opposes" => Some(Status::Oppose),
            "irrelevant" => Some(Status::Irrelevant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Support => "support",
            Status::Oppose => "oppose",
            Status::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub finding: Finding,
    pub disease: String,
    pub status: Status,
    pub rationale: String,
    pub turn: usize,
}

#[derive(Debug, Error)]
pub enum DeductiveError {
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error("template error: {0}")]
    Template(#[from] RenderError),
    #[error("unknown status '{0}'")]
    UnknownStatus(String),
    #[error("line {line}: missing field '{field}'")]
    MissingField { line: usize, field: &'static str },
    #[error("turn {got} appended after turn {last}")]
    TurnRegression { last: usize, got: usize },
    #[error("memory file line {line}: {message}")]
    BadMemoryLine { line: usize, message: String },
}

/// One parsed `finding: … | disease: … | status: … | rationale: …` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedRelation {
    pub finding: String,
    pub disease: String,
    pub status: Status,
    pub rationale: String,
}

/// Parses tagged relation lines. Lines that do not start with `finding:` are ignored;
/// an unrecognized status token is an error.
pub fn parse_relations(output: &str) -> Result<Vec<TaggedRelation>, DeductiveError> {
    let mut out = Vec::new();
    for (i, line) in output.lines().enumerate() {
        let trimmed = line.trim().trim_start_matches(['-', '*']).trim();
        if !trimmed.to_ascii_lowercase().starts_with("finding") {
            continue;
        }
        let mut fields: HashMap<String, String> = HashMap::new();
        for part in trimmed.split('|') {
            if let Some((k, v)) = part.split_once(':') {
                fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        }
        let take = |name: &'static str| -> Result<String, DeductiveError> {
            fields.get(name).cloned().ok_or(DeductiveError::MissingField { line: i + 1, field: name })
        };
        let finding = take("finding")?;
        let disease = take("disease")?.trim_start_matches('[').trim_end_matches(']').trim().to_string();
        let token = take("status")?;
        let status = Status::parse(&token).ok_or_else(|| DeductiveError::UnknownStatus(token.clone()))?;
        let rationale = fields.get("rationale").cloned().unwrap_or_default();
        out.push(TaggedRelation { finding, disease, status, rationale });
    }
    Ok(out)
}

/// Classifies every (finding, refined disease) pair. Pairs the backend leaves out
/// are recorded as irrelevant with rationale `"unaddressed"`.
pub fn analyze(
    backend: &dyn LlmBackend,
    catalog: &TemplateCatalog,
    params: &CompletionParams,
    findings: &[Finding],
    refined: &RefinedList,
    kb: &KnowledgeBase,
) -> Result<Vec<RelationEntry>, DeductiveError> {
    if refined.is_empty() || findings.is_empty() {
        return Ok(Vec::new());
    }
    let diseases = refined.diseases.iter().map(|id| knowledge_line(kb, id)).collect::<Vec<_>>().join("\n");
    let prompt = catalog
        .render(TemplateName::DeductiveAnalyze, &[("findings", render_findings(findings)), ("diseases", diseases)])?;
    let output = backend.complete(&prompt.text, params)?;
    let tagged = parse_relations(&output)?;

    let finding_index: HashMap<String, usize> =
        findings.iter().enumerate().rev().map(|(i, f)| (normalize(&f.text), i)).collect();
    let mut answers: HashMap<(usize, &str), (Status, String)> = HashMap::new();
    for rel in &tagged {
        let Some(&fi) = finding_index.get(&normalize(&rel.finding)) else {
            tracing::warn!(finding = %rel.finding, "relation names an unknown finding; skipped");
            continue;
        };
        let Some(d) = refined.diseases.iter().find(|d| **d == rel.disease) else {
            tracing::warn!(disease = %rel.disease, "relation names a disease outside the refined list; skipped");
            continue;
        };
        answers.entry((fi, d.as_str())).or_insert((rel.status, rel.rationale.clone()));
    }
    let mut out = Vec::with_capacity(findings.len() * refined.len());
    for (fi, f) in findings.iter().enumerate() {
        for d in &refined.diseases {
            let (status, rationale) = match answers.get(&(fi, d.as_str())) {
                Some((s, r)) => (*s, r.clone()),
                None => {
                    tracing::debug!(finding = %f.text, disease = %d, "pair unaddressed; defaulting to irrelevant");
                    (Status::Irrelevant, UNADDRESSED.to_string())
                }
            };
            out.push(RelationEntry { finding: f.clone(), disease: d.clone(), status, rationale, turn: f.turn });
        }
    }
    Ok(out)
}

/// Append-only record of relation entries across turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisMemory {
    entries: Vec<RelationEntry>,
}

impl DiagnosisMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[RelationEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_turn(&self) -> Option<usize> {
        self.entries.last().map(|e| e.turn)
    }

    /// Appends `entries`; all-or-nothing. Turn indices may not go backwards.
    pub fn append(&mut self, entries: Vec<RelationEntry>) -> Result<(), DeductiveError> {
        let mut last = self.last_turn().unwrap_or(0);
        for e in &entries {
            if e.turn < last {
                return Err(DeductiveError::TurnRegression { last, got: e.turn });
            }
            last = e.turn;
        }
        self.entries.extend(entries);
        Ok(())
    }

    /// Entries about `disease`.
    pub fn for_disease<'a>(&'a self, disease: &'a str) -> impl Iterator<Item = &'a RelationEntry> + 'a {
        self.entries.iter().filter(move |e| e.disease == disease)
    }

    /// Hash of the first `n` entries; equal hashes before and after an append show the prefix is untouched.
    pub fn prefix_hash(&self, n: usize) -> String {
        let json = serde_json::to_string(&self.entries[..n.min(self.entries.len())]).expect("entries serialize");
        sha256_hex(json.as_bytes())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, DeductiveError> {
        let mut memory = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DeductiveError::BadMemoryLine { line: i + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RelationEntry = serde_json::from_str(&line)
                .map_err(|e| DeductiveError::BadMemoryLine { line: i + 1, message: e.to_string() })?;
            memory.append(vec![e])?;
        }
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abductive::Soap;
    use crate::kb::DiseaseDoc;
    use crate::llm::MockBackend;
    use proptest::prelude::*;

    fn finding(t: &str, turn: usize) -> Finding {
        Finding { text: t.into(), soap: Soap::Subjective, turn }
    }

    fn entry(turn: usize, d: &str) -> RelationEntry {
        RelationEntry {
            finding: finding("f", turn),
            disease: d.into(),
            status: Status::Support,
            rationale: "r".into(),
            turn,
        }
    }

    fn kb() -> KnowledgeBase {
        ["d1", "d2"]
            .iter()
            .map(|id| DiseaseDoc {
                id: id.to_string(),
                name: format!("name {id}"),
                aliases: vec![],
                description: String::new(),
                diagnosis_knowledge: "k".into(),
            })
            .collect()
    }

    fn refined(ids: &[&str]) -> RefinedList {
        RefinedList { diseases: ids.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn tagged_statuses_parsed() {
        let out = "finding: f1 | disease: d1 | status: support | rationale: fits\n\
                   finding: f1 | disease: d2 | status: oppose | rationale: contradicts";
        let b = MockBackend::new().with_default(out);
        let entries = analyze(
            &b,
            &TemplateCatalog::builtin(),
            &CompletionParams::default(),
            &[finding("f1", 1)],
            &refined(&["d1", "d2"]),
            &kb(),
        )
        .unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].status, Status::Support);
        assert_eq!(entries[1].status, Status::Oppose);
        assert_eq!(entries[1].rationale, "contradicts");
    }

    #[test]
    fn empty_refined_makes_no_call() {
        let b = MockBackend::new();
        let entries = analyze(
            &b,
            &TemplateCatalog::builtin(),
            &CompletionParams::default(),
            &[finding("f1", 1)],
            &refined(&[]),
            &kb(),
        )
        .unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn unknown_status_named() {
        let b = MockBackend::new().with_default("finding: f1 | disease: d1 | status: maybe | rationale: ?");
        let err = analyze(
            &b,
            &TemplateCatalog::builtin(),
            &CompletionParams::default(),
            &[finding("f1", 1)],
            &refined(&["d1"]),
            &kb(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "unknown status 'maybe'");
    }

    #[test]
    fn omitted_pairs_default_to_irrelevant() {
        let b = MockBackend::new().with_default("finding: F1 | disease: [d2] | status: support | rationale: ok");
        let entries = analyze(
            &b,
            &TemplateCatalog::builtin(),
            &CompletionParams::default(),
            &[finding("f1", 3), finding("f2", 3)],
            &refined(&["d1", "d2"]),
            &kb(),
        )
        .unwrap();
        assert_eq!(entries.len(), 4);
        let by = |f: &str, d: &str| entries.iter().find(|e| e.finding.text == f && e.disease == d).unwrap();
        assert_eq!(by("f1", "d2").status, Status::Support);
        for (f, d) in [("f1", "d1"), ("f2", "d1"), ("f2", "d2")] {
            assert_eq!(by(f, d).status, Status::Irrelevant);
            assert_eq!(by(f, d).rationale, UNADDRESSED);
        }
        assert!(entries.iter().all(|e| e.turn == 3));
    }

    #[test]
    fn append_extends_and_keeps_prefix() {
        let mut m = DiagnosisMemory::new();
        m.append(vec![entry(1, "a"), entry(1, "b"), entry(2, "a")]).unwrap();
        let before = m.prefix_hash(3);
        m.append(vec![entry(2, "c"), entry(3, "a")]).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.prefix_hash(3), before);
    }

    #[test]
    fn append_empty_is_identity() {
        let mut m = DiagnosisMemory::new();
        m.append(vec![entry(1, "a")]).unwrap();
        let copy = m.clone();
        m.append(vec![]).unwrap();
        assert_eq!(m, copy);
    }

    #[test]
    fn turn_regression_rejected_atomically() {
        let mut m = DiagnosisMemory::new();
        m.append(vec![entry(3, "a")]).unwrap();
        let err = m.append(vec![entry(3, "b"), entry(2, "a")]).unwrap_err();
        assert!(matches!(err, DeductiveError::TurnRegression { last: 3, got: 2 }));
        assert_eq!(m.len(), 1);
    }

    fn arb_entry() -> impl Strategy<Value = RelationEntry> {
        (1usize..5, "[a-z ]{1,12}", "[a-z0-9]{1,4}", 0..3u8, "[ -~]{0,20}").prop_map(|(turn, f, d, s, r)| {
            RelationEntry {
                finding: Finding { text: f, soap: Soap::Objective, turn },
                disease: d,
                status: [Status::Support, Status::Oppose, Status::Irrelevant][s as usize],
                rationale: r,
                turn,
            }
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(mut entries in proptest::collection::vec(arb_entry(), 0..20)) {
            entries.sort_by_key(|e| e.turn);
            let mut m = DiagnosisMemory::new();
            m.append(entries).unwrap();
            let text = m.to_jsonl();
            let back = DiagnosisMemory::from_jsonl(text.as_bytes()).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.to_jsonl(), text);
        }
    }
}
