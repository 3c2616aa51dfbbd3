//! Retriever training with in-batch negatives and plain SGD.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{contrastive_loss_grad, dot, EncoderModel, FeatureVector};
use crate::kb::KnowledgeBase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.1, epochs: 10, batch_size: 8, seed: 0 }
    }
}

/// One training example: a query text with its relevant and explicitly irrelevant diseases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub anchor: String,
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<(), String> {
        if self.positives.is_empty() {
            return Err("no positive".into());
        }
        if let Some(id) = self.negatives.iter().find(|n| self.positives.contains(n)) {
            return Err(format!("'{id}' is both positive and negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("example {index}: unknown disease id '{id}'")]
    UnknownDisease { index: usize, id: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch} (first anchor: {anchor:?})")]
    NonFinite { epoch: usize, batch: usize, anchor: String },
}

/// Mean training loss of each epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epoch_losses: Vec<f64>,
}

/// Gradient over materialized columns, in column order.
pub type Gradient = BTreeMap<u32, Vec<f64>>;

pub(crate) fn accumulate(grad: &mut Gradient, features: &FeatureVector, upstream: &[f64]) {
    for &(col, x) in features.entries() {
        let g = grad.entry(col).or_insert_with(|| vec![0.0; upstream.len()]);
        for (gi, u) in g.iter_mut().zip(upstream) {
            *gi += u * x;
        }
    }
}

pub(crate) fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}

pub(crate) fn apply(model: &mut EncoderModel, grad: &Gradient, lr: f64) {
    for (&col, g) in grad {
        let column = model.column_mut(col);
        for (w, gi) in column.iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
}

struct Example<'a> {
    anchor: &'a FeatureVector,
    positives: &'a [String],
    negatives: &'a [String],
}

/// Mean contrastive loss of one minibatch and its gradient. Each example's
/// negatives are its explicit negatives plus the other examples' positives.
fn objective(
    model: &EncoderModel,
    batch: &[Example<'_>],
    doc_features: &HashMap<&str, FeatureVector>,
) -> (f64, Gradient) {
    let d = model.dim_out();
    let anchors: Vec<Vec<f64>> = batch.iter().map(|e| model.project(e.anchor).0).collect();
    let mut doc_ids: BTreeSet<&str> = BTreeSet::new();
    for e in batch {
        doc_ids.extend(e.positives.iter().map(String::as_str));
        doc_ids.extend(e.negatives.iter().map(String::as_str));
    }
    let docs: BTreeMap<&str, Vec<f64>> = doc_ids.iter().map(|id| (*id, model.project(&doc_features[id]).0)).collect();

    let mut d_anchor = vec![vec![0.0; d]; batch.len()];
    let mut d_doc: BTreeMap<&str, Vec<f64>> = docs.keys().map(|k| (*k, vec![0.0; d])).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, e) in batch.iter().enumerate() {
        let own: BTreeSet<&str> = e.positives.iter().map(String::as_str).collect();
        let mut negs: BTreeSet<&str> = e.negatives.iter().map(String::as_str).collect();
        for (j, other) in batch.iter().enumerate() {
            if j != i {
                negs.extend(other.positives.iter().map(String::as_str));
            }
        }
        let negs: Vec<&str> = negs.into_iter().filter(|n| !own.contains(n)).collect();
        let neg_scores: Vec<f64> = negs.iter().map(|n| dot(&anchors[i], &docs[n])).collect();
        for p in &own {
            let lg = contrastive_loss_grad(dot(&anchors[i], &docs[p]), &neg_scores);
            total += lg.loss;
            pairs += 1;
            axpy(&mut d_anchor[i], lg.d_pos, &docs[p]);
            axpy(d_doc.get_mut(p).expect("doc present"), lg.d_pos, &anchors[i]);
            for (n, g) in negs.iter().zip(&lg.d_negs) {
                axpy(&mut d_anchor[i], *g, &docs[n]);
                axpy(d_doc.get_mut(n).expect("doc present"), *g, &anchors[i]);
            }
        }
    }
    let scale = 1.0 / pairs.max(1) as f64;
    let mut grad = Gradient::new();
    for (e, up) in batch.iter().zip(&d_anchor) {
        let up: Vec<f64> = up.iter().map(|v| v * scale).collect();
        accumulate(&mut grad, e.anchor, &up);
    }
    for (id, up) in &d_doc {
        let up: Vec<f64> = up.iter().map(|v| v * scale).collect();
        accumulate(&mut grad, &doc_features[id], &up);
    }
    (total * scale, grad)
}

fn prepare<'a>(
    model: &EncoderModel,
    kb: &'a KnowledgeBase,
    examples: &'a [ContrastiveBatch],
) -> Result<(Vec<FeatureVector>, HashMap<&'a str, FeatureVector>), TrainError> {
    let mut doc_features = HashMap::new();
    for (index, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|reason| TrainError::InvalidExample { index, reason })?;
        for id in ex.positives.iter().chain(&ex.negatives) {
            let doc = kb.get(id).ok_or_else(|| TrainError::UnknownDisease { index, id: id.clone() })?;
            doc_features.entry(doc.id.as_str()).or_insert_with(|| model.featurize(&doc.text()));
        }
    }
    let anchors = examples.iter().map(|e| model.featurize(&e.anchor)).collect();
    Ok((anchors, doc_features))
}

/// Loss and gradient of `examples` treated as a single minibatch.
pub fn minibatch_objective(
    model: &EncoderModel,
    kb: &KnowledgeBase,
    examples: &[ContrastiveBatch],
) -> Result<(f64, Gradient), TrainError> {
    let (anchors, doc_features) = prepare(model, kb, examples)?;
    let batch: Vec<Example<'_>> = examples
        .iter()
        .zip(&anchors)
        .map(|(e, a)| Example { anchor: a, positives: &e.positives, negatives: &e.negatives })
        .collect();
    Ok(objective(model, &batch, &doc_features))
}

/// Trains the retriever; returns the updated model and the per-epoch mean loss.
pub fn train_retriever(
    model: &EncoderModel,
    kb: &KnowledgeBase,
    examples: &[ContrastiveBatch],
    config: &TrainConfig,
) -> Result<(EncoderModel, LossTrace), TrainError> {
    let (anchors, doc_features) = prepare(model, kb, examples)?;
    let mut model = model.clone();
    let mut trace = LossTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch_size = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| Example {
                    anchor: &anchors[i],
                    positives: &examples[i].positives,
                    negatives: &examples[i].negatives,
                })
                .collect();
            let (loss, grad) = objective(&model, &batch, &doc_features);
            if !loss.is_finite() || grad.values().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: b, anchor: examples[chunk[0]].anchor.clone() });
            }
            apply(&mut model, &grad, config.lr);
            epoch_total += loss;
            batches += 1;
        }
        trace.epoch_losses.push(if batches == 0 { 0.0 } else { epoch_total / batches as f64 });
    }
    Ok((model, trace))
}
