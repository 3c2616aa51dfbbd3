//! Text encoder and the two trainable scorers.
//!
//! The encoder maps hashed text features through a `d × dim_in` linear
//! projection. The projection is never materialized in full: every column
//! has a deterministic initial value derived from `(seed, column)`, and only
//! columns touched by training are stored.

mod features;
mod io;
mod loss;
mod ranker;
mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::kb::DiseaseDoc;
use crate::text::splitmix64;

pub use features::{FeatureVector, Hasher, NGRAM_MAX, NGRAM_MIN};
pub use io::{ModelFileError, MODEL_FORMAT_VERSION};
pub use loss::{contrastive_loss, contrastive_loss_grad, LossGrad};
pub use ranker::{ranker_objective, train_ranker, RankerGradient, RankerModel, RankerReport, RankerTurn};
pub use train::{minibatch_objective, train_retriever, ContrastiveBatch, Gradient, LossTrace, TrainConfig, TrainError};

pub const DEFAULT_DIM_IN: u32 = 1 << 18;
pub const DEFAULT_DIM_OUT: usize = 64;

/// Dense embedding of a text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear projection of hashed features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    dim_in: u32,
    dim_out: usize,
    seed: u64,
    namespace: &'static str,
    /// Materialized columns; every other column equals its initial value.
    columns: HashMap<u32, Vec<f64>>,
}

impl EncoderModel {
    pub fn new(dim_in: u32, dim_out: usize, seed: u64) -> Self {
        Self::with_namespace(dim_in, dim_out, seed, "text")
    }

    pub(crate) fn with_namespace(dim_in: u32, dim_out: usize, seed: u64, namespace: &'static str) -> Self {
        assert!(dim_out > 0, "dim_out must be positive");
        Self { dim_in, dim_out, seed, namespace, columns: HashMap::new() }
    }

    /// `dim_in = 2^18`, `d = 64`.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(DEFAULT_DIM_IN, DEFAULT_DIM_OUT, seed)
    }

    pub fn dim_in(&self) -> u32 {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hasher(&self) -> Hasher {
        Hasher::new(self.dim_in, self.namespace)
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        self.hasher().featurize(text)
    }

    /// Number of columns that differ from their initial value.
    pub fn trained_columns(&self) -> usize {
        self.columns.len()
    }

    /// Initial value of column `col`: uniform in ±sqrt(3/d), so entries have variance 1/d.
    pub(crate) fn init_column(&self, col: u32, out: &mut [f64]) {
        let bound = (3.0 / self.dim_out as f64).sqrt();
        let mut state = self.seed ^ (u64::from(col).wrapping_mul(0xD1B5_4A32_D192_ED03));
        for v in out.iter_mut() {
            let bits = splitmix64(&mut state) >> 11;
            let unit = bits as f64 / (1u64 << 53) as f64;
            *v = (2.0 * unit - 1.0) * bound;
        }
    }

    /// Current value of column `col`.
    pub fn column(&self, col: u32) -> Vec<f64> {
        match self.columns.get(&col) {
            Some(c) => c.clone(),
            None => {
                let mut out = vec![0.0; self.dim_out];
                self.init_column(col, &mut out);
                out
            }
        }
    }

    pub(crate) fn column_mut(&mut self, col: u32) -> &mut Vec<f64> {
        if !self.columns.contains_key(&col) {
            let mut out = vec![0.0; self.dim_out];
            self.init_column(col, &mut out);
            self.columns.insert(col, out);
        }
        self.columns.get_mut(&col).expect("column just inserted")
    }

    pub(crate) fn columns(&self) -> &HashMap<u32, Vec<f64>> {
        &self.columns
    }

    pub(crate) fn set_columns(&mut self, columns: HashMap<u32, Vec<f64>>) {
        self.columns = columns;
    }

    /// Adds `delta` to a single weight. Used by gradient checks.
    pub fn perturb(&mut self, col: u32, row: usize, delta: f64) {
        self.column_mut(col)[row] += delta;
    }

    pub fn weight(&self, col: u32, row: usize) -> f64 {
        self.column(col)[row]
    }

    pub fn project(&self, features: &FeatureVector) -> EmbeddingVector {
        let mut out = vec![0.0; self.dim_out];
        let mut scratch = vec![0.0; self.dim_out];
        for &(col, x) in features.entries() {
            let column: &[f64] = match self.columns.get(&col) {
                Some(c) => c,
                None => {
                    self.init_column(col, &mut scratch);
                    &scratch
                }
            };
            for (o, w) in out.iter_mut().zip(column) {
                *o += w * x;
            }
        }
        EmbeddingVector(out)
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.project(&self.featurize(text))
    }

    /// Dot product between the query and document embeddings.
    pub fn relevance(&self, query: &str, doc: &DiseaseDoc) -> f64 {
        self.embed(query).dot(&self.embed(&doc.text()))
    }

    pub fn all_finite(&self) -> bool {
        self.columns.values().all(|c| c.iter().all(|v| v.is_finite()))
    }
}
