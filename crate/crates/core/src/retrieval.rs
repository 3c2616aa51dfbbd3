//! Top-K disease retrieval and recall@K evaluation.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abductive::{Finding, Soap};
use crate::encoder::{EmbeddingVector, EncoderModel};
use crate::kb::KnowledgeBase;

pub const DEFAULT_K: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDisease {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub candidates: Vec<ScoredDisease>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.id.clone()).collect()
    }
}

/// Descending score, ascending id on ties.
pub fn by_score_then_id(a: &ScoredDisease, b: &ScoredDisease) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id))
}

/// Retrieval query for a set of findings: their texts in S, O, A, P order joined by "; ".
pub fn findings_query(findings: &[Finding]) -> String {
    let mut sorted: Vec<&Finding> = findings.iter().collect();
    sorted.sort_by_key(|f| Soap::ALL.iter().position(|s| *s == f.soap));
    sorted.iter().map(|f| f.text.as_str()).collect::<Vec<_>>().join("; ")
}

/// Document embeddings computed once for repeated queries against one knowledge base.
#[derive(Debug, Clone)]
pub struct DocIndex {
    embeddings: Vec<(String, EmbeddingVector)>,
}

impl DocIndex {
    pub fn build(model: &EncoderModel, kb: &KnowledgeBase) -> Self {
        let embeddings = kb.iter().map(|d| (d.id.clone(), model.embed(&d.text()))).collect();
        Self { embeddings }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn search(&self, query: &EmbeddingVector, k: usize) -> RetrievalResult {
        assert!(k >= 1, "k must be at least 1");
        let mut scored: Vec<ScoredDisease> =
            self.embeddings.iter().map(|(id, e)| ScoredDisease { id: id.clone(), score: query.dot(e) }).collect();
        let keep = k.min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep, by_score_then_id);
            scored.truncate(keep);
        }
        scored.sort_by(by_score_then_id);
        RetrievalResult { candidates: scored, k }
    }
}

/// The `k` most relevant documents to `query`; ties broken by ascending id.
pub fn retrieve_top_k(model: &EncoderModel, kb: &KnowledgeBase, query: &str, k: usize) -> RetrievalResult {
    DocIndex::build(model, kb).search(&model.embed(query), k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query: String,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallAveraging {
    /// Fraction over all (query, gold disease) pairs.
    #[default]
    Micro,
    /// Mean over queries of the per-query fraction.
    PerQuery,
}

#[derive(Debug, Error, PartialEq)]
pub enum RecallError {
    #[error("query {query}: unknown gold disease id '{id}'")]
    UnknownGold { query: usize, id: String },
    #[error("k values must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    /// Percentage in [0, 100].
    pub recall: f64,
}

/// Recall@K for each requested K, as percentages.
pub fn recall_at_k(
    model: &EncoderModel,
    kb: &KnowledgeBase,
    eval_set: &[EvalQuery],
    ks: &[usize],
    averaging: RecallAveraging,
) -> Result<Vec<RecallRow>, RecallError> {
    if ks.contains(&0) {
        return Err(RecallError::ZeroK);
    }
    for (query, q) in eval_set.iter().enumerate() {
        if let Some(id) = q.gold.iter().find(|g| !kb.contains(g)) {
            return Err(RecallError::UnknownGold { query, id: id.clone() });
        }
    }
    let index = DocIndex::build(model, kb);
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let rankings: Vec<Vec<String>> =
        eval_set.iter().map(|q| index.search(&model.embed(&q.query), max_k).ids()).collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let (mut hit, mut total, mut per_query) = (0usize, 0usize, 0.0);
            let mut counted_queries = 0usize;
            for (q, ranked) in eval_set.iter().zip(&rankings) {
                let top: HashSet<&str> = ranked.iter().take(k).map(String::as_str).collect();
                let h = q.gold.iter().filter(|g| top.contains(g.as_str())).count();
                hit += h;
                total += q.gold.len();
                if !q.gold.is_empty() {
                    per_query += h as f64 / q.gold.len() as f64;
                    counted_queries += 1;
                }
            }
            let recall = match averaging {
                RecallAveraging::Micro if total > 0 => 100.0 * hit as f64 / total as f64,
                RecallAveraging::PerQuery if counted_queries > 0 => 100.0 * per_query / counted_queries as f64,
                _ => 0.0,
            };
            RecallRow { k, recall }
        })
        .collect())
}

/// Plain-text table with one `Top-K` column per row of `rows`.
pub fn format_recall_table(label: &str, rows: &[RecallRow]) -> String {
    let header: Vec<String> = rows.iter().map(|r| format!("Top-{}", r.k)).collect();
    let values: Vec<String> = rows.iter().map(|r| format!("{:.2}%", r.recall)).collect();
    let widths: Vec<usize> = header.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
    let lw = label.len().max("Dataset".len());
    let mut out = format!("{:<lw$}", "Dataset");
    for (h, w) in header.iter().zip(&widths) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    out.push_str(&format!("{label:<lw$}"));
    for (v, w) in values.iter().zip(&widths) {
        out.push_str(&format!("  {v:>w$}"));
    }
    out.push('\n');
    out
}
