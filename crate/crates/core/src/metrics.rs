//! Session-level evaluation: average clicks (AC), average depth (AD),
//! category coverage (CC@K) and category KL divergence (KL@K).

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::SessionRecord;
use crate::error::{Error, Result};

/// Default smoothing weight of the history distribution in KL@K.
pub const KL_SMOOTHING: f64 = 0.01;

fn non_empty(sessions: &[SessionRecord], what: &str) -> Result<()> {
    if sessions.is_empty() {
        return Err(Error::Argument(format!("{what} of an empty session list")));
    }
    Ok(())
}

/// Mean number of clicks per session.
pub fn average_clicks(sessions: &[SessionRecord]) -> Result<f64> {
    non_empty(sessions, "average clicks")?;
    Ok(sessions.iter().map(|s| s.clicks() as f64).sum::<f64>() / sessions.len() as f64)
}

/// Mean browsing depth; censored sessions count their full length.
pub fn average_depth(sessions: &[SessionRecord]) -> Result<f64> {
    non_empty(sessions, "average depth")?;
    Ok(sessions.iter().map(|s| s.depth() as f64).sum::<f64>() / sessions.len() as f64)
}

/// A ranked list with the categories needed by the diversity metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub session_id: String,
    /// Categories of the ranked items, in rank order.
    pub ranked: Vec<u32>,
    /// Categories of the items the user clicked before this ranking.
    pub clicked_before: Vec<u32>,
}

fn top_k(list: &RankedList, k: usize) -> Result<&[u32]> {
    list.ranked.get(..k).ok_or_else(|| {
        Error::Contract(format!(
            "session {} ranks {} items, fewer than k = {k}",
            list.session_id,
            list.ranked.len()
        ))
    })
}

/// Mean fraction of the `total_categories` present in each top-`k`.
pub fn category_coverage(lists: &[RankedList], k: usize, total_categories: usize) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Argument("category coverage of an empty list".into()));
    }
    if total_categories == 0 || k == 0 {
        return Err(Error::Config("category coverage needs k >= 1 and at least one category".into()));
    }
    let mut sum = 0.0;
    for l in lists {
        let distinct: BTreeSet<u32> = top_k(l, k)?.iter().copied().collect();
        sum += distinct.len() as f64 / total_categories as f64;
    }
    Ok(sum / lists.len() as f64)
}

fn distribution(cats: &[u32]) -> BTreeMap<u32, f64> {
    let mut d = BTreeMap::new();
    for &c in cats {
        *d.entry(c).or_insert(0.0) += 1.0;
    }
    let n = cats.len() as f64;
    for v in d.values_mut() {
        *v /= n;
    }
    d
}

/// `sum_c p(c) ln(p(c) / ((1 - alpha) q(c) + alpha p(c)))` over categories
/// with `p(c) > 0`.
pub fn smoothed_kl(history: &[u32], ranked: &[u32], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("KL smoothing {alpha} outside (0, 1)")));
    }
    if history.is_empty() || ranked.is_empty() {
        return Err(Error::Argument("KL needs non-empty history and ranking".into()));
    }
    let p = distribution(history);
    let q = distribution(ranked);
    Ok(p.iter()
        .map(|(c, &pc)| {
            let qc = q.get(c).copied().unwrap_or(0.0);
            pc * (pc / ((1.0 - alpha) * qc + alpha * pc)).ln()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlAtK {
    /// Mean over sessions with at least one earlier click; `None` if none has.
    pub value: Option<f64>,
    pub sessions: usize,
    /// Sessions without earlier clicks, excluded from the mean.
    pub skipped: usize,
}

pub fn kl_at_k(lists: &[RankedList], k: usize, alpha: f64) -> Result<KlAtK> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("KL smoothing {alpha} outside (0, 1)")));
    }
    let mut sum = 0.0;
    let mut n = 0;
    let mut skipped = 0;
    for l in lists {
        let top = top_k(l, k)?;
        if l.clicked_before.is_empty() {
            skipped += 1;
            continue;
        }
        sum += smoothed_kl(&l.clicked_before, top, alpha)?;
        n += 1;
    }
    Ok(KlAtK {
        value: (n > 0).then(|| sum / n as f64),
        sessions: n,
        skipped,
    })
}

/// All metrics of one ranking method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_sessions: usize,
    pub ac: f64,
    pub ad: f64,
    pub cc_at_k: BTreeMap<usize, f64>,
    pub kl_at_k: BTreeMap<usize, KlAtK>,
}

/// Computes AC/AD on `simulated` and the diversity metrics on `lists`.
pub fn evaluate(
    simulated: &[SessionRecord],
    lists: &[RankedList],
    k_list: &[usize],
    total_categories: usize,
    alpha: f64,
) -> Result<EvalReport> {
    let mut cc = BTreeMap::new();
    let mut kl = BTreeMap::new();
    for &k in k_list {
        cc.insert(k, category_coverage(lists, k, total_categories)?);
        kl.insert(k, kl_at_k(lists, k, alpha)?);
    }
    Ok(EvalReport {
        n_sessions: simulated.len(),
        ac: average_clicks(simulated)?,
        ad: average_depth(simulated)?,
        cc_at_k: cc,
        kl_at_k: kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::session;

    fn list(id: &str, ranked: &[u32], before: &[u32]) -> RankedList {
        RankedList {
            session_id: id.into(),
            ranked: ranked.to_vec(),
            clicked_before: before.to_vec(),
        }
    }

    #[test]
    fn ac_and_ad() {
        let s = [session("a", &[true, false, true], true), session("b", &[false; 5], false)];
        assert_eq!(average_clicks(&s).unwrap(), 1.0);
        assert_eq!(average_depth(&s).unwrap(), 4.0);
        assert_eq!(average_clicks(&[session("c", &[true; 5], true)]).unwrap(), 5.0);
        assert!(average_clicks(&[]).is_err());
        assert!(average_depth(&[]).is_err());
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(category_coverage(&[list("a", &[2, 2, 2], &[])], 3, 4).unwrap(), 0.25);
        assert_eq!(category_coverage(&[list("a", &[0, 1, 2], &[])], 3, 3).unwrap(), 1.0);
        let two = [list("a", &[1, 1, 1], &[]), list("b", &[0, 1, 2], &[])];
        assert_eq!(category_coverage(&two, 3, 4).unwrap(), 0.5);
        match category_coverage(&[list("short", &[1], &[])], 2, 4) {
            Err(Error::Contract(m)) => assert!(m.contains("short")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(smoothed_kl(&[0, 1, 1], &[1, 0, 1], 0.01).unwrap(), 0.0);
        let v = smoothed_kl(&[0, 0], &[1, 1], 0.01).unwrap();
        assert!((v - 100f64.ln()).abs() < 1e-12);
        let v = smoothed_kl(&[0, 1], &[0, 0], 0.01).unwrap();
        let expect = 0.5 * (0.5f64 / 0.995).ln() + 0.5 * (0.5f64 / 0.005).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!(smoothed_kl(&[0], &[0], 0.0).is_err());
        assert!(smoothed_kl(&[0], &[0], 1.0).is_err());
    }

    #[test]
    fn kl_skips_sessions_without_clicks() {
        let lists = [list("a", &[0, 1], &[]), list("b", &[0, 0], &[0])];
        let r = kl_at_k(&lists, 2, 0.01).unwrap();
        assert_eq!(r.sessions, 1);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.value, Some(0.0));
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(h in proptest::collection::vec(0u32..4, 1..8),
                              r in proptest::collection::vec(0u32..4, 1..8),
                              alpha in 0.001f64..0.5) {
            proptest::prop_assert!(smoothed_kl(&h, &r, alpha).unwrap() >= -1e-15);
        }

        #[test]
        fn coverage_ignores_order(mut r in proptest::collection::vec(0u32..6, 5..6)) {
            let a = category_coverage(&[list("a", &r, &[])], 5, 6).unwrap();
            r.reverse();
            let b = category_coverage(&[list("a", &r, &[])], 5, 6).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
