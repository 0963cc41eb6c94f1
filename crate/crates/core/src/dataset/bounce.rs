//! Exposure ordering and MMR-driven bounce labels for learning-to-rank
//! queries.
//!
//! The first exposed item has no predecessors to be compared with; its
//! distance term is the largest pairwise distance inside the query group, so
//! position 1 is never penalized for lack of novelty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounce synthesis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BounceConfig {
    /// Weight of the predicted rating in MMR.
    pub lambda: f64,
    /// A user leaves at the first position whose decay rate drops below this.
    pub threshold: f64,
    /// Standardize each feature dimension before measuring distances.
    pub standardize: bool,
}

impl Default for BounceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            threshold: 0.8,
            standardize: false,
        }
    }
}

impl BounceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("threshold {} must be positive", self.threshold)));
        }
        Ok(())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest pairwise distance among `vectors` (0 for fewer than two).
pub fn max_pairwise_distance(vectors: &[&[f64]]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            best = best.max(euclidean(vectors[i], vectors[j]));
        }
    }
    best
}

/// `lambda * rating + (1 - lambda) * min_distance`.
pub fn mmr_from_distance(rating: f64, min_distance: f64, lambda: f64) -> f64 {
    lambda * rating + (1.0 - lambda) * min_distance
}

/// Modified MMR of `candidate` against the already exposed items.
/// `first_distance` stands in for the minimum when nothing has been exposed.
pub fn mmr(rating: f64, candidate: &[f64], exposed: &[&[f64]], lambda: f64, first_distance: f64) -> f64 {
    let min_distance = exposed
        .iter()
        .map(|e| euclidean(candidate, e))
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(first_distance);
    mmr_from_distance(rating, min_distance, lambda)
}

/// Average MMR over the first `j` positions (1-based).
pub fn decay_rate(mmr_values: &[f64], j: usize) -> Result<f64> {
    if j == 0 || j > mmr_values.len() {
        return Err(Error::Argument(format!(
            "decay rate position {j} outside 1..={}",
            mmr_values.len()
        )));
    }
    Ok(mmr_values[..j].iter().sum::<f64>() / j as f64)
}

/// Bounce labels up to and including the first under-threshold position.
#[derive(Debug, Clone, PartialEq)]
pub struct BounceLabels {
    pub labels: Vec<bool>,
    /// 1-based position of the bounce, if any.
    pub bounce_at: Option<usize>,
}

pub fn bounce_labels(decay: &[f64], threshold: f64) -> BounceLabels {
    let mut labels = Vec::with_capacity(decay.len());
    for (j, &d) in decay.iter().enumerate() {
        let b = d < threshold;
        labels.push(b);
        if b {
            return BounceLabels {
                labels,
                bounce_at: Some(j + 1),
            };
        }
    }
    BounceLabels {
        labels,
        bounce_at: None,
    }
}

/// Indices sorted by descending score; equal scores keep their input order.
pub fn exposure_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}
