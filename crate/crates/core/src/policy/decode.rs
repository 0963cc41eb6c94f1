//! Greedy (argmax) decoding for serving, in an incremental form that keeps
//! the fused pool and the carried hidden vector between steps, and a naive
//! form that rebuilds both from scratch at every step.

use std::time::{Duration, Instant};

use super::model::{argmax_unmasked, CarryMode, FusionCache, PolicyModel, PolicyState, Sweep};
use crate::data::{Item, User};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Chosen pool indices in ranking order.
    pub order: Vec<usize>,
    /// Logits of every sweep, one vector per emitted position.
    pub logits: Vec<Vec<f64>>,
    pub elapsed: Duration,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::Argument(format!("rank size {k} exceeds pool size {n}")));
    }
    Ok(())
}

/// One fusion pass and one GRU sweep per emitted item.
pub fn decode_incremental(model: &PolicyModel, user: &User, pool: &[&Item], k: usize) -> Result<Decoded> {
    check_k(k, pool.len())?;
    let start = Instant::now();
    let cache = model.fuse_pool(user, pool)?;
    let mut state = PolicyState::initial(pool.len(), model.d_model());
    let mut order = Vec::with_capacity(k);
    let mut logits = Vec::with_capacity(k);
    for _ in 0..k {
        let sw = model.sweep(&cache, &state.carry)?;
        let a = argmax_unmasked(&sw.logits, &state.mask)?;
        state.mask[a] = true;
        state.carry = model.next_carry(&sw, a);
        state.step += 1;
        order.push(a);
        logits.push(sw.logits);
    }
    Ok(Decoded {
        order,
        logits,
        elapsed: start.elapsed(),
    })
}

fn carry_of(model: &PolicyModel, sw: &Sweep, action: usize) -> Vec<f64> {
    match model.shape.carry {
        CarryMode::Last => sw.hidden.last().expect("non-empty pool").clone(),
        CarryMode::Chosen => sw.hidden[action].clone(),
    }
}

/// Recomputes the fusion layer and replays every earlier sweep before each
/// emitted item: `O(k^2 n)` GRU steps for `k` items from a pool of `n`.
pub fn decode_naive(model: &PolicyModel, user: &User, pool: &[&Item], k: usize) -> Result<Decoded> {
    check_k(k, pool.len())?;
    let start = Instant::now();
    let mut order: Vec<usize> = Vec::with_capacity(k);
    let mut logits = Vec::with_capacity(k);
    for _ in 0..k {
        let cache: FusionCache = model.fuse_pool(user, pool)?;
        let mut carry = vec![0.0; model.d_model()];
        for &prev in &order {
            let sw = model.sweep(&cache, &carry)?;
            carry = carry_of(model, &sw, prev);
        }
        let sw = model.sweep(&cache, &carry)?;
        let mut mask = vec![false; pool.len()];
        for &p in &order {
            mask[p] = true;
        }
        let a = argmax_unmasked(&sw.logits, &mask)?;
        order.push(a);
        logits.push(sw.logits);
    }
    Ok(Decoded {
        order,
        logits,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::item;
    use crate::policy::PolicyShape;

    #[test]
    fn incremental_matches_naive() {
        for (seed, carry) in [(1, CarryMode::Last), (2, CarryMode::Chosen)] {
            let shape = PolicyShape {
                d_model: 6,
                fusion_hidden: vec![8],
                carry,
            };
            let m = PolicyModel::new(2, 2, shape, seed).unwrap();
            let user = User {
                id: "u".into(),
                features: vec![1.0, 0.3],
            };
            let pool: Vec<Item> = (0..12)
                .map(|i| item(&format!("x{i}"), 0, vec![(i as f64).sin(), (2.0 * i as f64).cos()]))
                .collect();
            let refs: Vec<&Item> = pool.iter().collect();
            let a = decode_incremental(&m, &user, &refs, 6).unwrap();
            let b = decode_naive(&m, &user, &refs, 6).unwrap();
            assert_eq!(a.order, b.order);
            assert_eq!(a.logits, b.logits);
            let mut seen = a.order.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 6);
            assert!(decode_incremental(&m, &user, &refs, 13).is_err());
        }
    }
}
