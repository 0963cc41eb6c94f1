//! A synthetic user population with known conditional CTR and PBR.
//!
//! Both probabilities are logistic in the user x item cross features plus a
//! repetition term: the fraction of earlier impressions in the session that
//! share the current item's category.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Item, SessionRecord, User};
use crate::env::{simulate_session, EnvEstimate, EnvScorer};
use crate::error::{Error, Result};

/// Logits are clipped here so probabilities stay strictly inside (0, 1).
const MAX_LOGIT: f64 = 30.0;

/// One logistic head of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitHead {
    /// Weights over the cross features, user index outer.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Coefficient of the same-category repetition fraction.
    #[serde(default)]
    pub repeat: f64,
    /// Replaces the model with a fixed probability (test worlds only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

impl LogitHead {
    fn prob(&self, user: &[f64], item: &[f64], repeat: f64) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        let mut z = self.bias + self.repeat * repeat;
        let ni = item.len();
        for (a, u) in user.iter().enumerate() {
            for (b, x) in item.iter().enumerate() {
                z += self.weights[a * ni + b] * u * x;
            }
        }
        let z = z.clamp(-MAX_LOGIT, MAX_LOGIT);
        1.0 / (1.0 + (-z).exp())
    }
}

/// Ground-truth environment: catalog, population and the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub users: Vec<User>,
    pub items: Vec<Item>,
    pub ctr: LogitHead,
    pub pbr: LogitHead,
    pub n_categories: usize,
}

/// Randomly drawn world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratedWorld {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Continuous user taste dimensions (a constant 1 is prepended).
    pub taste_dim: usize,
    /// Continuous item attributes (appended after the category one-hot).
    pub attr_dim: usize,
    pub weight_scale: f64,
    pub ctr_bias: f64,
    pub pbr_bias: f64,
    pub ctr_repeat: f64,
    pub pbr_repeat: f64,
    /// Correlation between the CTR and PBR cross weights; positive values
    /// make attractive items also more likely to end the session.
    pub ctr_pbr_correlation: f64,
}

impl Default for GeneratedWorld {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 50,
            n_items: 40,
            n_categories: 5,
            taste_dim: 2,
            attr_dim: 2,
            weight_scale: 0.6,
            ctr_bias: -1.0,
            pbr_bias: -2.0,
            ctr_repeat: -0.5,
            pbr_repeat: 1.5,
            ctr_pbr_correlation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitUser {
    pub id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitItem {
    pub id: String,
    pub features: Vec<f64>,
    pub category: u32,
}

/// Hand-specified world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitWorld {
    pub users: Vec<ExplicitUser>,
    pub items: Vec<ExplicitItem>,
    pub ctr: LogitHead,
    pub pbr: LogitHead,
}

/// Either a generated or an explicit world, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<GeneratedWorld>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ExplicitWorld>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            generated: Some(GeneratedWorld::default()),
            explicit: None,
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> Result<SyntheticWorld> {
        match (&self.generated, &self.explicit) {
            (Some(g), None) => SyntheticWorld::generate(g),
            (None, Some(e)) => SyntheticWorld::from_explicit(e),
            _ => Err(Error::Config(
                "world needs exactly one of [world.generated] or [world.explicit]".into(),
            )),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl SyntheticWorld {
    pub fn generate(cfg: &GeneratedWorld) -> Result<Self> {
        if cfg.n_items == 0 || cfg.n_users == 0 || cfg.n_categories == 0 {
            return Err(Error::Config("world needs users, items and categories".into()));
        }
        if !(-1.0..=1.0).contains(&cfg.ctr_pbr_correlation) {
            return Err(Error::Config("ctr_pbr_correlation outside [-1, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let users = (0..cfg.n_users)
            .map(|u| {
                let mut f = vec![1.0];
                f.extend((0..cfg.taste_dim).map(|_| normal(&mut rng)));
                User {
                    id: format!("u{u}"),
                    features: f,
                }
            })
            .collect::<Vec<_>>();
        let items = (0..cfg.n_items)
            .map(|i| {
                let cat = (i % cfg.n_categories) as u32;
                let mut f = vec![0.0; cfg.n_categories];
                f[cat as usize] = 1.0;
                f.extend((0..cfg.attr_dim).map(|_| normal(&mut rng)));
                Item {
                    id: format!("i{i:03}"),
                    features: f,
                    category: cat,
                }
            })
            .collect::<Vec<_>>();
        let n_cross = (1 + cfg.taste_dim) * (cfg.n_categories + cfg.attr_dim);
        let rho = cfg.ctr_pbr_correlation;
        let mut ctr_w = Vec::with_capacity(n_cross);
        let mut pbr_w = Vec::with_capacity(n_cross);
        for _ in 0..n_cross {
            let a = normal(&mut rng);
            let b = normal(&mut rng);
            ctr_w.push(cfg.weight_scale * a);
            pbr_w.push(cfg.weight_scale * (rho * a + (1.0 - rho * rho).sqrt() * b));
        }
        Ok(Self {
            users,
            items,
            ctr: LogitHead {
                weights: ctr_w,
                bias: cfg.ctr_bias,
                repeat: cfg.ctr_repeat,
                constant: None,
            },
            pbr: LogitHead {
                weights: pbr_w,
                bias: cfg.pbr_bias,
                repeat: cfg.pbr_repeat,
                constant: None,
            },
            n_categories: cfg.n_categories,
        })
    }

    pub fn from_explicit(cfg: &ExplicitWorld) -> Result<Self> {
        let (Some(u0), Some(i0)) = (cfg.users.first(), cfg.items.first()) else {
            return Err(Error::Config("explicit world needs users and items".into()));
        };
        let (du, di) = (u0.features.len(), i0.features.len());
        if cfg.users.iter().any(|u| u.features.len() != du) || cfg.items.iter().any(|i| i.features.len() != di) {
            return Err(Error::Config("inconsistent feature dimensions in explicit world".into()));
        }
        for (name, head) in [("ctr", &cfg.ctr), ("pbr", &cfg.pbr)] {
            if head.constant.is_none() && head.weights.len() != du * di {
                return Err(Error::Config(format!(
                    "{name} head has {} weights, expected {}",
                    head.weights.len(),
                    du * di
                )));
            }
            if head.constant.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::Config(format!("{name} constant outside [0, 1]")));
            }
        }
        let mut ids = std::collections::HashSet::new();
        if !cfg.items.iter().all(|i| ids.insert(i.id.as_str())) {
            return Err(Error::Config("duplicate item id in explicit world".into()));
        }
        let n_categories = cfg.items.iter().map(|i| i.category as usize + 1).max().unwrap_or(1);
        Ok(Self {
            users: cfg
                .users
                .iter()
                .map(|u| User {
                    id: u.id.clone(),
                    features: u.features.clone(),
                })
                .collect(),
            items: cfg
                .items
                .iter()
                .map(|i| Item {
                    id: i.id.clone(),
                    features: i.features.clone(),
                    category: i.category,
                })
                .collect(),
            ctr: cfg.ctr.clone(),
            pbr: cfg.pbr.clone(),
            n_categories,
        })
    }

    pub fn user_dim(&self) -> usize {
        self.users[0].features.len()
    }

    pub fn item_dim(&self) -> usize {
        self.items[0].features.len()
    }

    /// Fraction of earlier history items sharing the last item's category.
    pub fn repeat_fraction(history: &[&Item]) -> f64 {
        let Some((last, prev)) = history.split_last() else {
            return 0.0;
        };
        if prev.is_empty() {
            return 0.0;
        }
        prev.iter().filter(|i| i.category == last.category).count() as f64 / prev.len() as f64
    }

    /// Mean per-position log-loss (click head plus bounce head) of the true
    /// probabilities on logged sessions.
    pub fn log_loss(&self, sessions: &[SessionRecord]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in sessions {
            let hist: Vec<&Item> = s.impressions.iter().map(|i| &i.item).collect();
            let est = self.estimates(&s.user, &hist)?;
            for (imp, e) in s.impressions.iter().zip(est) {
                total += bce(e.ctr, imp.click) + bce(e.pbr, imp.bounce);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Argument("log-loss of an empty session list".into()));
        }
        Ok(total / n as f64)
    }
}

/// Binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(p: f64, label: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl EnvScorer for SyntheticWorld {
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        let Some(last) = history.last() else {
            return Err(Error::Argument("empty history".into()));
        };
        let rep = Self::repeat_fraction(history);
        Ok(EnvEstimate {
            ctr: self.ctr.prob(&user.features, &last.features, rep),
            pbr: self.pbr.prob(&user.features, &last.features, rep),
        })
    }
}

/// Order in which the logging system shows pool items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoggingPolicy {
    /// Uniformly random order without replacement.
    #[default]
    Uniform,
    /// Pool order as drawn from the catalog.
    PoolOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Derived from the run seed rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
    pub sessions: usize,
    pub pool_size: usize,
    pub max_depth: usize,
    pub logging: LoggingPolicy,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sessions: 1000,
            pool_size: 10,
            max_depth: 10,
            logging: LoggingPolicy::Uniform,
        }
    }
}

/// Samples one session per index from an independent RNG stream, so the
/// output does not depend on how the work is split across threads.
pub fn generate_synthetic(world: &SyntheticWorld, cfg: &GenerateConfig) -> Result<Vec<SessionRecord>> {
    if cfg.pool_size == 0 || cfg.pool_size > world.items.len() {
        return Err(Error::Argument(format!(
            "pool size {} must be in 1..={} (catalog size)",
            cfg.pool_size,
            world.items.len()
        )));
    }
    if cfg.max_depth == 0 || cfg.max_depth > cfg.pool_size {
        return Err(Error::Argument(format!(
            "max depth {} must be in 1..={}",
            cfg.max_depth, cfg.pool_size
        )));
    }
    (0..cfg.sessions)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64);
            sample_session(world, cfg, s, &mut rng)
        })
        .collect()
}

/// Draws the starting state of one session: a user and a candidate pool.
pub fn sample_start(world: &SyntheticWorld, pool_size: usize, rng: &mut ChaCha8Rng) -> (usize, Vec<usize>) {
    let user = rng.gen_range(0..world.users.len());
    let mut pool = rand::seq::index::sample(rng, world.items.len(), pool_size).into_vec();
    pool.sort_unstable();
    (user, pool)
}

fn sample_session(
    world: &SyntheticWorld,
    cfg: &GenerateConfig,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SessionRecord> {
    let (u, pool_idx) = sample_start(world, cfg.pool_size, rng);
    let pool: Vec<Item> = pool_idx.iter().map(|&i| world.items[i].clone()).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    if cfg.logging == LoggingPolicy::Uniform {
        order.shuffle(rng);
    }
    let shown: Vec<&Item> = order.iter().take(cfg.max_depth).map(|&j| &pool[j]).collect();
    simulate_session(world, format!("s{index}"), &world.users[u], &shown, Some(pool.clone()), rng)
}

/// Item lookup by id for a world's catalog.
pub fn catalog_index(world: &SyntheticWorld) -> HashMap<&str, usize> {
    world.items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect()
}
