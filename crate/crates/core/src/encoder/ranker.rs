//! Priority ranker: scores how likely the next doctor response discusses a disease.
//!
//! The input realizes `{history} the next response will discuss: {disease}` as
//! the concatenation of three hashed blocks (history, disease, history×disease
//! word pairs). A linear head maps the projected representation to a scalar.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{accumulate, apply, Gradient};
use super::{contrastive_loss_grad, dot, EncoderModel, FeatureVector, Hasher, LossTrace, TrainConfig, TrainError};
use crate::kb::KnowledgeBase;
use crate::text::splitmix64;

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub(crate) encoder: EncoderModel,
    pub(crate) head: Vec<f64>,
    pub(crate) bias: f64,
}

/// One ranker training turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankerTurn {
    pub history: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

impl RankerTurn {
    /// Builds a turn from annotations: positives are `e_post`, negatives are
    /// `(refined ∪ e_pri) \ e_post`.
    pub fn from_annotations(history: &str, e_post: &[String], refined: &[String], e_pri: &[String]) -> Self {
        let pos: BTreeSet<&String> = e_post.iter().collect();
        let mut negatives = Vec::new();
        for id in refined.iter().chain(e_pri) {
            if !pos.contains(id) && !negatives.contains(id) {
                negatives.push(id.clone());
            }
        }
        Self { history: history.into(), positives: e_post.to_vec(), negatives }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankerReport {
    pub trace: LossTrace,
    /// Indices of turns skipped for having no negatives.
    pub skipped_turns: Vec<usize>,
}

impl RankerModel {
    pub fn new(dim_in: u32, dim_out: usize, seed: u64) -> Self {
        let encoder = EncoderModel::with_namespace(dim_in, dim_out, seed, "ranker");
        let bound = (3.0 / dim_out as f64).sqrt();
        let mut state = seed ^ 0x005E_ED0F_4EAD;
        let head = (0..dim_out)
            .map(|_| {
                let unit = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
                (2.0 * unit - 1.0) * bound
            })
            .collect();
        Self { encoder, head, bias: 0.0 }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(super::DEFAULT_DIM_IN, super::DEFAULT_DIM_OUT, seed)
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    pub fn seed(&self) -> u64 {
        self.encoder.seed()
    }

    pub fn features(&self, history: &str, disease: &str) -> FeatureVector {
        let dim = self.encoder.dim_in();
        FeatureVector::concat(&[
            Hasher::new(dim, "ranker/history").featurize(history),
            Hasher::new(dim, "ranker/disease").featurize(disease),
            Hasher::new(dim, "ranker/cross").cross(history, disease),
        ])
    }

    fn score_features(&self, f: &FeatureVector) -> (f64, Vec<f64>) {
        let repr = self.encoder.project(f).0;
        (dot(&self.head, &repr) + self.bias, repr)
    }

    /// r(history, disease).
    pub fn score(&self, history: &str, disease: &str) -> f64 {
        self.score_features(&self.features(history, disease)).0
    }

    pub fn perturb_head(&mut self, row: usize, delta: f64) {
        self.head[row] += delta;
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite() && self.head.iter().all(|v| v.is_finite()) && self.bias.is_finite()
    }
}

struct Prepared {
    pos: Vec<FeatureVector>,
    neg: Vec<FeatureVector>,
}

/// Ranker gradient: projection columns plus head.
pub struct RankerGradient {
    pub columns: Gradient,
    pub head: Vec<f64>,
}

fn objective(model: &RankerModel, batch: &[&Prepared]) -> (f64, RankerGradient) {
    let d = model.encoder.dim_out();
    let mut grad = RankerGradient { columns: Gradient::new(), head: vec![0.0; d] };
    let mut total = 0.0;
    let mut pairs = 0usize;
    // (features, d_loss/d_score) collected first so scaling happens once.
    let mut upstream: Vec<(&FeatureVector, Vec<f64>, f64)> = Vec::new();
    for turn in batch {
        let negs: Vec<(f64, Vec<f64>)> = turn.neg.iter().map(|f| model.score_features(f)).collect();
        let neg_scores: Vec<f64> = negs.iter().map(|(s, _)| *s).collect();
        for pf in &turn.pos {
            let (ps, prepr) = model.score_features(pf);
            let lg = contrastive_loss_grad(ps, &neg_scores);
            total += lg.loss;
            pairs += 1;
            upstream.push((pf, prepr, lg.d_pos));
            for ((nf, (_, nrepr)), g) in turn.neg.iter().zip(&negs).zip(&lg.d_negs) {
                upstream.push((nf, nrepr.clone(), *g));
            }
        }
    }
    let scale = 1.0 / pairs.max(1) as f64;
    for (f, repr, ds) in upstream {
        let ds = ds * scale;
        for (h, r) in grad.head.iter_mut().zip(&repr) {
            *h += ds * r;
        }
        let up: Vec<f64> = model.head.iter().map(|w| w * ds).collect();
        accumulate(&mut grad.columns, f, &up);
    }
    (total * scale, grad)
}

fn cached_features<'a>(
    cache: &mut HashMap<(&'a str, &'a str), FeatureVector>,
    model: &RankerModel,
    kb: &KnowledgeBase,
    history: &'a str,
    ids: &'a [String],
) -> Vec<FeatureVector> {
    ids.iter()
        .map(|id| {
            cache.entry((history, id.as_str())).or_insert_with(|| model.features(history, kb.name_of(id))).clone()
        })
        .collect()
}

fn prepare(
    model: &RankerModel,
    kb: &KnowledgeBase,
    turns: &[RankerTurn],
) -> Result<(Vec<Option<Prepared>>, Vec<usize>), TrainError> {
    let mut cache: HashMap<(&str, &str), FeatureVector> = HashMap::new();
    let mut prepared = Vec::with_capacity(turns.len());
    let mut skipped = Vec::new();
    for (index, t) in turns.iter().enumerate() {
        if t.positives.is_empty() {
            return Err(TrainError::InvalidExample { index, reason: "no positive".into() });
        }
        if let Some(id) = t.negatives.iter().find(|n| t.positives.contains(n)) {
            return Err(TrainError::InvalidExample { index, reason: format!("'{id}' is both positive and negative") });
        }
        for id in t.positives.iter().chain(&t.negatives) {
            if !kb.contains(id) {
                return Err(TrainError::UnknownDisease { index, id: id.clone() });
            }
        }
        if t.negatives.is_empty() {
            skipped.push(index);
            prepared.push(None);
            continue;
        }
        let pos = cached_features(&mut cache, model, kb, &t.history, &t.positives);
        let neg = cached_features(&mut cache, model, kb, &t.history, &t.negatives);
        prepared.push(Some(Prepared { pos, neg }));
    }
    Ok((prepared, skipped))
}

/// Loss and gradient of `turns` treated as one minibatch (turns without negatives ignored).
pub fn ranker_objective(
    model: &RankerModel,
    kb: &KnowledgeBase,
    turns: &[RankerTurn],
) -> Result<(f64, RankerGradient), TrainError> {
    let (prepared, _) = prepare(model, kb, turns)?;
    let batch: Vec<&Prepared> = prepared.iter().flatten().collect();
    Ok(objective(model, &batch))
}

/// Trains the ranker with the contrastive objective; turns without negatives are
/// skipped and listed in the report.
pub fn train_ranker(
    model: &RankerModel,
    kb: &KnowledgeBase,
    turns: &[RankerTurn],
    config: &TrainConfig,
) -> Result<(RankerModel, RankerReport), TrainError> {
    let (prepared, skipped_turns) = prepare(model, kb, turns)?;
    let mut model = model.clone();
    let mut report = RankerReport { trace: LossTrace::default(), skipped_turns };
    let mut order: Vec<usize> = (0..turns.len()).filter(|i| prepared[*i].is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch_size = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| prepared[i].as_ref().expect("filtered")).collect();
            let (loss, grad) = objective(&model, &batch);
            let finite = loss.is_finite()
                && grad.head.iter().all(|g| g.is_finite())
                && grad.columns.values().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(TrainError::NonFinite { epoch, batch: b, anchor: turns[chunk[0]].history.clone() });
            }
            apply(&mut model.encoder, &grad.columns, config.lr);
            for (w, g) in model.head.iter_mut().zip(&grad.head) {
                *w -= config.lr * g;
            }
            epoch_total += loss;
            batches += 1;
        }
        report.trace.epoch_losses.push(if batches == 0 { 0.0 } else { epoch_total / batches as f64 });
    }
    Ok((model, report))
}

/// Column-ordered view used by model files.
pub(crate) fn sorted_columns(model: &EncoderModel) -> BTreeMap<u32, Vec<f64>> {
    model.columns().iter().map(|(k, v)| (*k, v.clone())).collect()
}
