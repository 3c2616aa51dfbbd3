//! Hashed text features.
//!
//! A text becomes a sparse, L2-normalized term-frequency vector over
//! `dim_in` buckets. Features are word unigrams plus character n-grams
//! (n = 3..=5) of every word padded with `<` and `>`.

use std::collections::BTreeMap;

use crate::text::{fnv1a, words};

pub const NGRAM_MIN: usize = 3;
pub const NGRAM_MAX: usize = 5;

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    fn from_counts(counts: BTreeMap<u32, f64>) -> Self {
        let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::default();
        }
        Self { entries: counts.into_iter().map(|(k, v)| (k, v / norm)).collect() }
    }

    /// Sums several blocks, each already normalized, then renormalizes.
    pub fn concat(blocks: &[FeatureVector]) -> Self {
        let mut counts = BTreeMap::new();
        for b in blocks {
            for &(k, v) in &b.entries {
                *counts.entry(k).or_insert(0.0) += v;
            }
        }
        Self::from_counts(counts)
    }
}

/// Feature hasher bound to a bucket count and a namespace.
#[derive(Debug, Clone, Copy)]
pub struct Hasher {
    dim_in: u32,
    namespace: &'static str,
}

impl Hasher {
    pub fn new(dim_in: u32, namespace: &'static str) -> Self {
        assert!(dim_in > 0, "dim_in must be positive");
        Self { dim_in, namespace }
    }

    fn bucket(&self, kind: &str, feature: &str) -> u32 {
        let mut key = String::with_capacity(self.namespace.len() + kind.len() + feature.len() + 2);
        key.push_str(self.namespace);
        key.push('\u{1f}');
        key.push_str(kind);
        key.push('\u{1f}');
        key.push_str(feature);
        (fnv1a(key.as_bytes()) % u64::from(self.dim_in)) as u32
    }

    fn add_word(&self, word: &str, counts: &mut BTreeMap<u32, f64>) {
        *counts.entry(self.bucket("w", word)).or_insert(0.0) += 1.0;
        let padded: Vec<char> = std::iter::once('<').chain(word.chars()).chain(std::iter::once('>')).collect();
        for n in NGRAM_MIN..=NGRAM_MAX {
            for gram in padded.windows(n) {
                let g: String = gram.iter().collect();
                *counts.entry(self.bucket("c", &g)).or_insert(0.0) += 1.0;
            }
        }
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        let mut counts = BTreeMap::new();
        for w in words(text) {
            self.add_word(&w, &mut counts);
        }
        FeatureVector::from_counts(counts)
    }

    /// Word-pair features between two texts (unique words on each side).
    pub fn cross(&self, left: &str, right: &str) -> FeatureVector {
        let mut l = words(left);
        l.sort();
        l.dedup();
        let mut r = words(right);
        r.sort();
        r.dedup();
        let mut counts = BTreeMap::new();
        for a in &l {
            for b in &r {
                let pair = format!("{a}\u{1e}{b}");
                *counts.entry(self.bucket("x", &pair)).or_insert(0.0) += 1.0;
            }
        }
        FeatureVector::from_counts(counts)
    }
}
