//! Learning-to-rank queries turned into browsing sessions: a pointwise
//! scorer orders each query group into an exposure sequence, graded labels
//! become clicks, and the running MMR average decides where the user leaves.

use serde::{Deserialize, Serialize};

use super::bounce::{bounce_labels, exposure_order, max_pairwise_distance, mmr, BounceConfig};
use super::ltr::{click_label, group_by_query, LtrExample};
use crate::data::{Impression, Item, SessionRecord, User};
use crate::error::{Error, Result};

/// Maps a feature vector to a click score.
pub trait PointwiseScorer: Sync {
    fn score(&self, features: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> PointwiseScorer for F {
    fn score(&self, features: &[f64]) -> f64 {
        self(features)
    }
}

/// L2-regularized logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticScorer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticScorer {
    /// Full-batch gradient descent toward `click_label(rating)`.
    pub fn fit(examples: &[&LtrExample], iterations: usize, lr: f64, l2: f64) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::Argument("cannot fit a scorer on no examples".into()));
        };
        let dim = first.features.len();
        let n = examples.len() as f64;
        let (mean, scale) = standardization(examples.iter().map(|e| e.features.as_slice()), dim);
        let xs: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| standardize(&e.features, &mean, &scale))
            .collect();
        let ys: Vec<f64> = examples
            .iter()
            .map(|e| if click_label(e.rating) { 1.0 } else { 0.0 })
            .collect();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        for _ in 0..iterations {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = 1.0 / (1.0 + (-z).exp()) - y;
                for (g, xv) in gw.iter_mut().zip(x) {
                    *g += err * xv;
                }
                gb += err;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= lr * (g / n + l2 * *wv);
            }
            b -= lr * gb / n;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }
}

impl PointwiseScorer for LogisticScorer {
    fn score(&self, features: &[f64]) -> f64 {
        let x = standardize(features, &self.mean, &self.scale);
        let z: f64 = x.iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>() + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

fn standardization<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // constant columns keep unit scale
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// Settings for turning an LTR file into sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YahooConfig {
    pub bounce: BounceConfig,
    /// Dense feature dimension of the LTR file.
    pub dim: usize,
    /// Leading fraction of query groups used only to fit the exposure scorer.
    pub scorer_holdout: f64,
    pub scorer_iterations: usize,
    pub scorer_lr: f64,
    pub scorer_l2: f64,
}

impl Default for YahooConfig {
    fn default() -> Self {
        Self {
            bounce: BounceConfig::default(),
            dim: 700,
            scorer_holdout: 0.2,
            scorer_iterations: 200,
            scorer_lr: 0.5,
            scorer_l2: 1e-4,
        }
    }
}

/// Sessions plus the query ids skipped along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct YahooBuild {
    pub sessions: Vec<SessionRecord>,
    pub skipped: Vec<String>,
}

/// Per-position quantities of one query's exposure sequence, mostly useful
/// for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTrace {
    /// Original indices in exposure order (truncated at the bounce).
    pub order: Vec<usize>,
    pub mmr: Vec<f64>,
    pub decay: Vec<f64>,
    pub bounce_at: Option<usize>,
}

/// Exposure order, MMR, decay rates and the bounce position of one group.
pub fn trace_query(
    group: &[&LtrExample],
    scorer: &dyn PointwiseScorer,
    reprs: &[Vec<f64>],
    cfg: &BounceConfig,
) -> ExposureTrace {
    let ratings: Vec<f64> = group
        .iter()
        .map(|e| scorer.score(&e.features).clamp(0.0, 1.0))
        .collect();
    let full_order = exposure_order(&ratings);
    let refs: Vec<&[f64]> = reprs.iter().map(Vec::as_slice).collect();
    let first_distance = max_pairwise_distance(&refs);

    let mut order = Vec::new();
    let mut mmrs = Vec::new();
    let mut decay = Vec::new();
    let mut sum = 0.0;
    for &idx in &full_order {
        let exposed: Vec<&[f64]> = order.iter().map(|&i: &usize| refs[i]).collect();
        let m = mmr(ratings[idx], refs[idx], &exposed, cfg.lambda, first_distance);
        order.push(idx);
        mmrs.push(m);
        sum += m;
        decay.push(sum / order.len() as f64);
        // nothing after the first bounce is ever shown
        if decay[decay.len() - 1] < cfg.threshold {
            break;
        }
    }
    let bounce_at = bounce_labels(&decay, cfg.threshold).bounce_at;
    ExposureTrace {
        order,
        mmr: mmrs,
        decay,
        bounce_at,
    }
}

/// Converts every query group into one session record.
pub fn build_yahoo_sessions(
    examples: &[LtrExample],
    scorer: &dyn PointwiseScorer,
    cfg: &BounceConfig,
) -> Result<YahooBuild> {
    cfg.validate()?;
    let groups = group_by_query(examples);
    let dim = examples.first().map_or(0, |e| e.features.len());
    let (mean, scale) = if cfg.standardize {
        standardization(examples.iter().map(|e| e.features.as_slice()), dim)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };

    let mut sessions = Vec::new();
    let mut skipped = Vec::new();
    for (qid, group) in groups {
        if group.is_empty() {
            skipped.push(qid);
            continue;
        }
        let reprs: Vec<Vec<f64>> = group
            .iter()
            .map(|e| standardize(&e.features, &mean, &scale))
            .collect();
        let trace = trace_query(&group, scorer, &reprs, cfg);
        let item = |i: usize| Item {
            id: format!("{qid}:{i}"),
            features: group[i].features.clone(),
            category: 0,
        };
        let impressions = trace
            .order
            .iter()
            .enumerate()
            .map(|(j, &i)| Impression {
                position: j + 1,
                item: item(i),
                click: click_label(group[i].rating),
                bounce: trace.bounce_at == Some(j + 1),
            })
            .collect();
        let rec = SessionRecord {
            session_id: format!("q{qid}"),
            user: User {
                id: qid.clone(),
                features: vec![1.0],
            },
            impressions,
            pool: Some((0..group.len()).map(item).collect()),
            censored: trace.bounce_at.is_none(),
        };
        rec.validate()?;
        sessions.push(rec);
    }
    Ok(YahooBuild { sessions, skipped })
}

/// Full pipeline from parsed examples: fit the exposure scorer on the leading
/// holdout groups, then convert the remaining groups.
pub fn build_yahoo_with_fitted_scorer(examples: &[LtrExample], cfg: &YahooConfig) -> Result<YahooBuild> {
    cfg.bounce.validate()?;
    if !(0.0..1.0).contains(&cfg.scorer_holdout) {
        return Err(Error::Config(format!(
            "scorer_holdout {} outside [0, 1)",
            cfg.scorer_holdout
        )));
    }
    if examples.is_empty() {
        return Ok(YahooBuild {
            sessions: Vec::new(),
            skipped: Vec::new(),
        });
    }
    let groups = group_by_query(examples);
    let n_hold = ((groups.len() as f64) * cfg.scorer_holdout).floor() as usize;
    let (fit_groups, keep): (Vec<_>, Vec<_>) = if n_hold == 0 {
        (groups.iter().collect(), groups.iter().collect())
    } else {
        (groups[..n_hold].iter().collect(), groups[n_hold..].iter().collect())
    };
    let fit: Vec<&LtrExample> = fit_groups.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let scorer = LogisticScorer::fit(&fit, cfg.scorer_iterations, cfg.scorer_lr, cfg.scorer_l2)?;
    let kept: Vec<LtrExample> = keep
        .iter()
        .flat_map(|(_, g)| g.iter().map(|e| (*e).clone()))
        .collect();
    build_yahoo_sessions(&kept, &scorer, &cfg.bounce)
}
