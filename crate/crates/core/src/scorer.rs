//! Outfit compatibility scoring.
//!
//! The logit of an outfit with item embeddings z_1..z_N is
//! `(1 / (N (N - 1))) * sum_{i<j} z_i . z_j` and the score is its sigmoid.
//! Pairs are summed in a canonical order (embeddings sorted lexicographically)
//! so the result is bit-identical under any permutation of the inputs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::catalog::Outfit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutfit {
    pub outfit: Outfit,
    pub logit: f64,
    pub score: f64,
}

impl ScoredOutfit {
    pub fn new(outfit: Outfit, logit: f64) -> Self {
        ScoredOutfit {
            outfit,
            logit,
            score: sigmoid(logit),
        }
    }
}

/// How a pair sum is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide by N(N-1).
    #[default]
    PairCount,
    /// Raw pair sum.
    None,
}

impl Normalization {
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Normalization::PairCount => 1.0 / (n * (n - 1)) as f64,
            Normalization::None => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

fn check<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<()> {
    if embeddings.len() < 2 {
        return Err(Error::Shape(format!(
            "an outfit needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].as_ref().len();
    if let Some(bad) = embeddings.iter().find(|e| e.as_ref().len() != dim) {
        return Err(Error::Shape(format!(
            "embedding dimension {} differs from {dim}",
            bad.as_ref().len()
        )));
    }
    Ok(())
}

/// Sum of pairwise dot products in canonical order.
pub fn pair_sum<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    check(embeddings)?;
    let mut order: Vec<&[f64]> = embeddings.iter().map(AsRef::as_ref).collect();
    order.sort_by(|a, b| lexicographic(a, b));
    let mut sum = 0.0;
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            sum += dot(order[i], order[j]);
        }
    }
    Ok(sum)
}

pub fn outfit_logit_with<V: AsRef<[f64]>>(embeddings: &[V], norm: Normalization) -> Result<f64> {
    Ok(pair_sum(embeddings)? * norm.factor(embeddings.len()))
}

/// Normalised pair-sum logit of an outfit (hero embedded with the hero flag).
pub fn outfit_logit<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    outfit_logit_with(embeddings, Normalization::PairCount)
}

pub fn outfit_score<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    outfit_logit(embeddings).map(sigmoid)
}

/// Dot product of every unordered pair `(i, j)`, `i < j`, in input order.
pub fn pairwise_dots<V: AsRef<[f64]>>(embeddings: &[V]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            out.push((i, j, dot(embeddings[i].as_ref(), embeddings[j].as_ref())));
        }
    }
    out
}

/// Gradient of the normalised logit with respect to each embedding:
/// `d logit / d z_i = (1 / (N (N - 1))) * sum_{j != i} z_j`.
pub fn logit_gradient<V: AsRef<[f64]>>(embeddings: &[V]) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let dim = embeddings.first().map_or(0, |e| e.as_ref().len());
    let scale = Normalization::PairCount.factor(n);
    let mut total = vec![0.0; dim];
    for e in embeddings {
        for (t, v) in total.iter_mut().zip(e.as_ref()) {
            *t += v;
        }
    }
    embeddings
        .iter()
        .map(|e| {
            total
                .iter()
                .zip(e.as_ref())
                .map(|(t, v)| (t - v) * scale)
                .collect()
        })
        .collect()
}
