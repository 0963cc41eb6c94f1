//! The position-conditional scoring interface shared by the synthetic world,
//! the learned simulation environment and the test scorers.

use rand::Rng;

use crate::data::{Impression, Item, SessionRecord, User};
use crate::error::{Error, Result};

/// Conditional click and bounce probability of one impression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvEstimate {
    pub ctr: f64,
    pub pbr: f64,
}

/// Source of conditional CTR/PBR for the last item of a browsing history.
pub trait EnvScorer: Sync {
    /// Estimates for `history.last()` given everything before it.
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate>;

    /// Estimates for every prefix of `list`, in order.
    fn estimates(&self, user: &User, list: &[&Item]) -> Result<Vec<EnvEstimate>> {
        (1..=list.len()).map(|t| self.estimate(user, &list[..t])).collect()
    }

    /// Longest history the scorer accepts, if bounded.
    fn max_len(&self) -> Option<usize> {
        None
    }

    /// Estimate for appending `next` to `history`; rejects repeats.
    fn rollout_estimate(&self, user: &User, history: &[&Item], next: &Item) -> Result<EnvEstimate> {
        if history.iter().any(|h| h.id == next.id) {
            return Err(Error::Contract(format!("item {} is already in the history", next.id)));
        }
        let mut full: Vec<&Item> = history.to_vec();
        full.push(next);
        self.estimate(user, &full)
    }
}

impl<E: EnvScorer + ?Sized> EnvScorer for &E {
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        (**self).estimate(user, history)
    }

    fn estimates(&self, user: &User, list: &[&Item]) -> Result<Vec<EnvEstimate>> {
        (**self).estimates(user, list)
    }

    fn max_len(&self) -> Option<usize> {
        (**self).max_len()
    }
}

impl<E: EnvScorer + ?Sized> EnvScorer for Box<E> {
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        (**self).estimate(user, history)
    }

    fn estimates(&self, user: &User, list: &[&Item]) -> Result<Vec<EnvEstimate>> {
        (**self).estimates(user, list)
    }

    fn max_len(&self) -> Option<usize> {
        (**self).max_len()
    }
}

/// Shows `list` to a simulated user: per position a click is drawn from the
/// CTR and then a bounce from the PBR; the session ends at the first bounce.
pub fn simulate_session<E: EnvScorer + ?Sized, R: Rng>(
    env: &E,
    session_id: String,
    user: &User,
    list: &[&Item],
    pool: Option<Vec<Item>>,
    rng: &mut R,
) -> Result<SessionRecord> {
    let mut impressions = Vec::with_capacity(list.len());
    let mut censored = true;
    for t in 0..list.len() {
        let e = env.estimate(user, &list[..=t])?;
        let click = rng.gen::<f64>() < e.ctr;
        let bounce = rng.gen::<f64>() < e.pbr;
        impressions.push(Impression {
            position: t + 1,
            item: list[t].clone(),
            click,
            bounce,
        });
        if bounce {
            censored = false;
            break;
        }
    }
    Ok(SessionRecord {
        session_id,
        user: user.clone(),
        impressions,
        pool,
        censored,
    })
}

/// Replaces the bounce estimate of an inner scorer with a constant.
#[derive(Debug, Clone)]
pub struct ConstantPbr<E> {
    pub inner: E,
    pub pbr: f64,
}

impl<E: EnvScorer> EnvScorer for ConstantPbr<E> {
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        let e = self.inner.estimate(user, history)?;
        Ok(EnvEstimate {
            ctr: e.ctr,
            pbr: self.pbr,
        })
    }

    fn max_len(&self) -> Option<usize> {
        self.inner.max_len()
    }
}

/// Scorer backed by a closure over `(user, history)`.
pub struct FnScorer<F>(pub F);

impl<F> EnvScorer for FnScorer<F>
where
    F: Fn(&User, &[&Item]) -> EnvEstimate + Sync,
{
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        if history.is_empty() {
            return Err(Error::Argument("empty history".into()));
        }
        Ok((self.0)(user, history))
    }
}
