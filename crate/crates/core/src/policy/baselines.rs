//! Non-learned greedy rankers driven by an environment's conditional
//! estimates.

use crate::data::{Item, User};
use crate::env::{EnvEstimate, EnvScorer};
use crate::error::{Error, Result};

/// Repeatedly appends the unplaced item with the highest `score`; ties go to
/// the smallest item id.
fn greedy_by<E, F>(env: &E, user: &User, pool: &[&Item], k: usize, score: F) -> Result<Vec<usize>>
where
    E: EnvScorer + ?Sized,
    F: Fn(EnvEstimate) -> f64,
{
    if k > pool.len() {
        return Err(Error::Argument(format!("rank size {k} exceeds pool size {}", pool.len())));
    }
    let mut placed = vec![false; pool.len()];
    let mut order = Vec::with_capacity(k);
    let mut history: Vec<&Item> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (i, item) in pool.iter().enumerate() {
            if placed[i] {
                continue;
            }
            let s = score(env.rollout_estimate(user, &history, item)?);
            let better = match best {
                None => true,
                Some((b, bs)) => s > bs || (s == bs && item.id < pool[b].id),
            };
            if better {
                best = Some((i, s));
            }
        }
        let (i, _) = best.expect("k <= pool size");
        placed[i] = true;
        order.push(i);
        history.push(pool[i]);
    }
    Ok(order)
}

/// Context-aware greedy CTR ranking: highest conditional CTR at each step.
pub fn greedy_ctr_rank<E: EnvScorer + ?Sized>(env: &E, user: &User, pool: &[&Item], k: usize) -> Result<Vec<usize>> {
    greedy_by(env, user, pool, k, |e| e.ctr)
}

/// Weighted greedy ranking by `alpha * CTR + (1 - alpha) * (1 - PBR)`.
///
/// With `literal` the score is `alpha * CTR + (1 - alpha) * PBR`, which
/// rewards items likely to end the session.
pub fn weighted_greedy_rank<E: EnvScorer + ?Sized>(
    env: &E,
    user: &User,
    pool: &[&Item],
    k: usize,
    alpha: f64,
    literal: bool,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if literal {
        greedy_by(env, user, pool, k, |e| alpha * e.ctr + (1.0 - alpha) * e.pbr)
    } else {
        greedy_by(env, user, pool, k, |e| alpha * e.ctr + (1.0 - alpha) * (1.0 - e.pbr))
    }
}
