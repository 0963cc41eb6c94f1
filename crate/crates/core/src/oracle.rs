//! Exact click-through expectation, exhaustive optimal rankings and the
//! Monte-Carlo estimator used to cross-check them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Item, User};
use crate::env::{EnvEstimate, EnvScorer};
use crate::error::{Error, Result};

/// Largest pool [`optimal_ranking`] will enumerate.
pub const MAX_ORACLE_POOL: usize = 10;

/// Per-position conditional click and bounce probabilities of one ranked list.
#[derive(Debug, Clone, PartialEq)]
pub struct CteProfile {
    pub ctr: Vec<f64>,
    pub pbr: Vec<f64>,
    pub gamma: f64,
}

impl CteProfile {
    pub fn new(ctr: Vec<f64>, pbr: Vec<f64>) -> Result<Self> {
        Self::with_gamma(ctr, pbr, 1.0)
    }

    pub fn with_gamma(ctr: Vec<f64>, pbr: Vec<f64>, gamma: f64) -> Result<Self> {
        if ctr.len() != pbr.len() {
            return Err(Error::Argument(format!(
                "profile has {} CTRs and {} PBRs",
                ctr.len(),
                pbr.len()
            )));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !ctr.iter().chain(&pbr).all(in_unit) {
            return Err(Error::Argument("profile probabilities must lie in [0, 1]".into()));
        }
        if !in_unit(&gamma) {
            return Err(Error::Argument(format!("discount {gamma} outside [0, 1]")));
        }
        Ok(Self { ctr, pbr, gamma })
    }

    pub fn from_estimates(estimates: &[EnvEstimate]) -> Result<Self> {
        Self::new(
            estimates.iter().map(|e| e.ctr).collect(),
            estimates.iter().map(|e| e.pbr).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ctr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctr.is_empty()
    }
}

/// `sum_t gamma^(t-1) * CTR_t * prod_{k<t} (1 - PBR_k)`.
pub fn cte(profile: &CteProfile) -> f64 {
    let mut survive = 1.0;
    let mut discount = 1.0;
    let mut total = 0.0;
    for (c, b) in profile.ctr.iter().zip(&profile.pbr) {
        total += discount * c * survive;
        survive *= 1.0 - b;
        discount *= profile.gamma;
    }
    total
}

/// Exact CTE of `list` under `env`.
pub fn list_cte<E: EnvScorer + ?Sized>(env: &E, user: &User, list: &[&Item]) -> Result<f64> {
    if list.is_empty() {
        return Ok(0.0);
    }
    let est = env.estimates(user, list)?;
    Ok(cte(&CteProfile::from_estimates(&est)?))
}

/// Best ordered selection of `depth` items from `pool`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalRanking {
    /// Indices into the pool, in ranked order.
    pub order: Vec<usize>,
    pub cte: f64,
}

/// Enumerates every ordered selection of `depth` items from `pool` and returns
/// the CTE maximizer. Ties go to the lexicographically smallest id sequence.
pub fn optimal_ranking<E: EnvScorer + ?Sized>(
    env: &E,
    user: &User,
    pool: &[Item],
    depth: usize,
) -> Result<OptimalRanking> {
    if pool.len() > MAX_ORACLE_POOL {
        return Err(Error::Capacity(format!(
            "oracle pool of {} exceeds MAX_ORACLE_POOL = {MAX_ORACLE_POOL}",
            pool.len()
        )));
    }
    if depth == 0 || depth > pool.len() {
        return Err(Error::Argument(format!(
            "depth {depth} must be in 1..={}",
            pool.len()
        )));
    }
    let mut by_id: Vec<usize> = (0..pool.len()).collect();
    by_id.sort_by(|&a, &b| pool[a].id.cmp(&pool[b].id));

    let subtrees: Vec<Result<Option<(Vec<usize>, f64)>>> = by_id
        .par_iter()
        .map(|&first| {
            let mut search = Search {
                env,
                user,
                pool,
                by_id: &by_id,
                depth,
                prefix: vec![first],
                used: vec![false; pool.len()],
                best: None,
            };
            search.used[first] = true;
            let e = env.estimate(user, &[&pool[first]])?;
            search.descend(e.ctr, 1.0 - e.pbr)?;
            Ok(search.best)
        })
        .collect();

    let mut best: Option<(Vec<usize>, f64)> = None;
    for sub in subtrees {
        if let Some((order, value)) = sub? {
            if best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((order, value));
            }
        }
    }
    let (order, cte) = best.expect("non-empty pool yields a ranking");
    Ok(OptimalRanking { order, cte })
}

struct Search<'a, E: ?Sized> {
    env: &'a E,
    user: &'a User,
    pool: &'a [Item],
    by_id: &'a [usize],
    depth: usize,
    prefix: Vec<usize>,
    used: Vec<bool>,
    best: Option<(Vec<usize>, f64)>,
}

impl<E: EnvScorer + ?Sized> Search<'_, E> {
    fn descend(&mut self, value: f64, survive: f64) -> Result<()> {
        if self.prefix.len() == self.depth {
            if self.best.as_ref().is_none_or(|(_, b)| value > *b) {
                self.best = Some((self.prefix.clone(), value));
            }
            return Ok(());
        }
        for &next in self.by_id {
            if self.used[next] {
                continue;
            }
            self.prefix.push(next);
            self.used[next] = true;
            let hist: Vec<&Item> = self.prefix.iter().map(|&i| &self.pool[i]).collect();
            let e = self.env.estimate(self.user, &hist)?;
            self.descend(value + survive * e.ctr, survive * (1.0 - e.pbr))?;
            self.used[next] = false;
            self.prefix.pop();
        }
        Ok(())
    }
}

/// Anything that can produce one sampled episode return.
pub trait RolloutSource: Sync {
    fn sample_return(&self, rng: &mut ChaCha8Rng) -> Result<f64>;
}

impl RolloutSource for CteProfile {
    fn sample_return(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut total = 0.0;
        let mut discount = 1.0;
        for (c, b) in self.ctr.iter().zip(&self.pbr) {
            if rng.gen::<f64>() < *c {
                total += discount;
            }
            if rng.gen::<f64>() < *b {
                break;
            }
            discount *= self.gamma;
        }
        Ok(total)
    }
}

/// Monte-Carlo mean and standard error of the episode return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn mc_cte<S: RolloutSource + ?Sized>(source: &S, n_rollouts: usize, seed: u64) -> Result<McEstimate> {
    if n_rollouts == 0 {
        return Err(Error::Argument("mc_cte needs at least one rollout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_rollouts {
        let x = source.sample_return(&mut rng)?;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std_error = if n_rollouts > 1 {
        (m2 / (n_rollouts - 1) as f64).sqrt() / (n_rollouts as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error,
        n: n_rollouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FnScorer;

    fn profile(c: &[f64], b: &[f64]) -> CteProfile {
        CteProfile::new(c.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn single_position_is_ctr() {
        assert_eq!(cte(&profile(&[0.37], &[0.9])), 0.37);
    }

    #[test]
    fn two_positions_closed_form() {
        assert_eq!(cte(&profile(&[0.5, 0.5], &[0.5, 0.3])), 0.75);
    }

    #[test]
    fn absorbing_first_bounce() {
        assert_eq!(cte(&profile(&[0.2, 0.9, 0.9], &[1.0, 0.1, 0.1])), 0.2);
    }

    #[test]
    fn gamma_zero_is_first_ctr() {
        let p = CteProfile::with_gamma(vec![0.3, 0.9], vec![0.1, 0.1], 0.0).unwrap();
        assert_eq!(cte(&p), 0.3);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(CteProfile::new(vec![0.1], vec![]).is_err());
        assert!(CteProfile::new(vec![1.1], vec![0.0]).is_err());
        assert!(CteProfile::with_gamma(vec![0.1], vec![0.0], 1.5).is_err());
    }

    fn items(n: usize) -> Vec<Item> {
        (0..n)
            .map(|i| Item {
                id: format!("i{i}"),
                features: vec![i as f64],
                category: 0,
            })
            .collect()
    }

    fn user() -> User {
        User {
            id: "u".into(),
            features: vec![1.0],
        }
    }

    #[test]
    fn oracle_single_item() {
        let env = FnScorer(|_: &User, _: &[&Item]| EnvEstimate { ctr: 0.4, pbr: 0.2 });
        let r = optimal_ranking(&env, &user(), &items(1), 1).unwrap();
        assert_eq!(r.order, vec![0]);
        assert_eq!(r.cte, 0.4);
    }

    #[test]
    fn oracle_no_bounce_picks_top_ctrs() {
        let ctrs = [0.125, 0.75, 0.25, 0.875, 0.5];
        let env = FnScorer(move |_: &User, h: &[&Item]| EnvEstimate {
            ctr: ctrs[h.last().unwrap().features[0] as usize],
            pbr: 0.0,
        });
        let r = optimal_ranking(&env, &user(), &items(5), 3).unwrap();
        let mut picked = r.order.clone();
        picked.sort();
        assert_eq!(picked, vec![1, 3, 4]);
        assert_eq!(r.cte, 2.125);
        // tie-break: lexicographically smallest id order among equal optima
        assert_eq!(r.order, vec![1, 3, 4]);
    }

    #[test]
    fn oracle_guards() {
        let env = FnScorer(|_: &User, _: &[&Item]| EnvEstimate { ctr: 0.4, pbr: 0.2 });
        let err = optimal_ranking(&env, &user(), &items(11), 2).unwrap_err();
        assert!(err.to_string().contains("MAX_ORACLE_POOL"));
        assert!(optimal_ranking(&env, &user(), &items(3), 4).is_err());
    }

    #[test]
    fn mc_deterministic_env_has_zero_variance() {
        let p = profile(&[1.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 0.0]);
        let est = mc_cte(&p, 500, 7).unwrap();
        assert_eq!(est.mean, 2.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mc_single_rollout_is_integer() {
        let est = mc_cte(&profile(&[0.5, 0.5], &[0.5, 0.5]), 1, 3).unwrap();
        assert_eq!(est.mean.fract(), 0.0);
        assert!(mc_cte(&profile(&[0.5], &[0.5]), 0, 3).is_err());
    }

    #[test]
    fn mc_converges_to_closed_form() {
        let p = profile(&[0.5, 0.5], &[0.5, 0.5]);
        let est = mc_cte(&p, 100_000, 11).unwrap();
        assert!((est.mean - 0.75).abs() < 3.0 * est.std_error, "{est:?}");
    }

    proptest::proptest! {
        #[test]
        fn cte_monotone(
            c in proptest::collection::vec(0.0f64..1.0, 1..8),
            b in proptest::collection::vec(0.0f64..1.0, 8),
            pos in 0usize..8,
            bump in 0.0f64..0.5,
        ) {
            let t = c.len();
            let b: Vec<f64> = b[..t].to_vec();
            let base = cte(&profile(&c, &b));
            let k = pos % t;
            let mut c2 = c.clone();
            c2[k] = (c2[k] + bump).min(1.0);
            proptest::prop_assert!(cte(&profile(&c2, &b)) >= base);
            let mut b2 = b.clone();
            b2[k] = (b2[k] + bump).min(1.0);
            proptest::prop_assert!(cte(&profile(&c, &b2)) <= base + 1e-15);
        }
    }
}
