//! Generation metrics: BLEU, ROUGE-N recall and entity F1.
//!
//! All text is tokenized with [`crate::text::tokenize`]; its id is written into
//! every report so numbers from different tokenizers are never compared silently.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::KnowledgeBase;
use crate::text::{sha256_hex, tokenize, words, TOKENIZER_ID};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("reference has {len} tokens, fewer than n = {n}")]
    ReferenceTooShort { len: usize, n: usize },
    #[error("{outputs} outputs for {gold} gold turns")]
    Misaligned { outputs: usize, gold: usize },
    #[error("max_n must be at least 1")]
    ZeroOrder,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// Clipped matches and hypothesis n-gram total.
fn clipped<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Modified n-gram precision p_n for n = 1..=max_n.
pub fn ngram_precisions<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n).map(|n| clipped(hyp, reference, n)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to numerator and denominator of every order above 1.
    AddOne,
}

/// Sentence BLEU with uniform weights over orders 1..=max_n. An order for which
/// both sentences are too short to contain any n-gram is left out of the mean.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(
    hyp: &[S],
    reference: &[T],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricsError> {
    if max_n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for (i, (m, total)) in ngram_precisions(hyp, reference, max_n).into_iter().enumerate() {
        // 0/0: neither side is long enough for this order, so it carries no evidence either way.
        if total == 0 && reference.len() <= i {
            continue;
        }
        orders += 1;
        let (m, total) = match smoothing {
            Smoothing::AddOne if i > 0 => (m + 1, total + 1),
            _ => (m, total),
        };
        if m == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Fraction of reference n-grams (with multiplicity) also found in the hypothesis.
pub fn rouge_n<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if reference.len() < n {
        return Err(MetricsError::ReferenceTooShort { len: reference.len(), n });
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched: usize = r.iter().map(|(g, c)| (*c).min(h.get(g).copied().unwrap_or(0))).sum();
    Ok(matched as f64 / (reference.len() - n + 1) as f64)
}

/// Set F1. Two empty sets score 1; exactly one empty scores 0.
pub fn entity_f1<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = pred.intersection(gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / pred.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Surface forms (names and aliases) mapped to disease ids, matched longest-first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    forms: BTreeMap<Vec<String>, String>,
    longest: usize,
}

impl EntityLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a surface form. An already registered form keeps its first id.
    pub fn insert(&mut self, surface: &str, id: &str) {
        let key = words(surface);
        if key.is_empty() {
            return;
        }
        self.longest = self.longest.max(key.len());
        self.forms.entry(key).or_insert_with(|| id.to_string());
    }

    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        let mut lex = Self::new();
        for d in kb.iter() {
            lex.insert(&d.name, &d.id);
            for a in &d.aliases {
                lex.insert(a, &d.id);
            }
        }
        lex
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    /// Ids mentioned in `text`, scanning left to right and taking the longest form at each position.
    pub fn extract(&self, text: &str) -> BTreeSet<String> {
        let toks = words(text);
        let mut out = BTreeSet::new();
        let mut i = 0;
        while i < toks.len() {
            let max = self.longest.min(toks.len() - i);
            match (1..=max).rev().find_map(|len| self.forms.get(&toks[i..i + len]).map(|id| (len, id))) {
                Some((len, id)) => {
                    out.insert(id.clone());
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Content hash over the sorted entries.
    pub fn hash(&self) -> String {
        let mut buf = String::new();
        for (k, v) in &self.forms {
            buf.push_str(&k.join(" "));
            buf.push('\t');
            buf.push_str(v);
            buf.push('\n');
        }
        sha256_hex(buf.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub entity_f1: f64,
}

/// Scores one hypothesis against one reference. ROUGE-n is `None` when the
/// reference has fewer than n tokens.
pub fn score_turn(
    hyp: &str,
    reference: &str,
    lexicon: &EntityLexicon,
    smoothing: Smoothing,
) -> Result<TurnMetrics, MetricsError> {
    let h = tokenize(hyp);
    let r = tokenize(reference);
    let rouge = |n| match rouge_n(&h, &r, n) {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::ReferenceTooShort { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(TurnMetrics {
        bleu1: bleu(&h, &r, 1, smoothing)?,
        bleu2: bleu(&h, &r, 2, smoothing)?,
        bleu4: bleu(&h, &r, 4, smoothing)?,
        rouge1: rouge(1)?,
        rouge2: rouge(2)?,
        entity_f1: entity_f1(&lexicon.extract(hyp), &lexicon.extract(reference)),
    })
}

/// Corpus report: per-turn metrics averaged over turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub tokenizer: String,
    pub lexicon_hash: String,
    pub aggregation: String,
    pub smoothing: Smoothing,
    pub turns: usize,
    #[serde(rename = "B-1")]
    pub bleu1: f64,
    #[serde(rename = "B-2")]
    pub bleu2: f64,
    #[serde(rename = "B-4")]
    pub bleu4: f64,
    #[serde(rename = "R-1")]
    pub rouge1: f64,
    #[serde(rename = "R-2")]
    pub rouge2: f64,
    #[serde(rename = "E-F")]
    pub entity_f1: f64,
    /// Turns left out of R-2 because the reference had a single token.
    pub rouge2_skipped: usize,
}

impl GenerationReport {
    /// Percent table with the usual column order.
    pub fn table(&self) -> String {
        let cols = [
            ("B-1", self.bleu1),
            ("B-2", self.bleu2),
            ("B-4", self.bleu4),
            ("R-1", self.rouge1),
            ("R-2", self.rouge2),
            ("E-F", self.entity_f1),
        ];
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>7}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{:>7.2}", v * 100.0)).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

pub fn evaluate_run<S: AsRef<str>, T: AsRef<str>>(
    outputs: &[S],
    gold: &[T],
    lexicon: &EntityLexicon,
    smoothing: Smoothing,
) -> Result<GenerationReport, MetricsError> {
    if outputs.len() != gold.len() {
        return Err(MetricsError::Misaligned { outputs: outputs.len(), gold: gold.len() });
    }
    let per: Vec<TurnMetrics> = outputs
        .iter()
        .zip(gold)
        .map(|(h, r)| score_turn(h.as_ref(), r.as_ref(), lexicon, smoothing))
        .collect::<Result<_, _>>()?;
    let (rouge2, r2n) = mean(per.iter().filter_map(|t| t.rouge2));
    Ok(GenerationReport {
        tokenizer: TOKENIZER_ID.to_string(),
        lexicon_hash: lexicon.hash(),
        aggregation: "per-turn mean".to_string(),
        smoothing,
        turns: per.len(),
        bleu1: mean(per.iter().map(|t| t.bleu1)).0,
        bleu2: mean(per.iter().map(|t| t.bleu2)).0,
        bleu4: mean(per.iter().map(|t| t.bleu4)).0,
        rouge1: mean(per.iter().filter_map(|t| t.rouge1)).0,
        rouge2,
        entity_f1: mean(per.iter().map(|t| t.entity_f1)).0,
        rouge2_skipped: per.len() - r2n,
    })
}
