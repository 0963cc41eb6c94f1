//! Category coverage and smoothed KL divergence of ranked lists.
//!
//! cargo run --release --example diversity_metrics

use cterank::metrics::{category_coverage, kl_at_k, RankedList, KL_SMOOTHING};

fn main() -> cterank::Result<()> {
    let lists = vec![
        RankedList {
            session_id: "a".into(),
            ranked: vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4],
            clicked_before: vec![0, 0, 1],
        },
        RankedList {
            session_id: "b".into(),
            ranked: vec![5, 5, 5, 5, 5, 0, 1, 2, 3, 4],
            clicked_before: vec![],
        },
        RankedList {
            session_id: "c".into(),
            ranked: vec![2, 3, 2, 3, 2, 3, 2, 3, 2, 3],
            clicked_before: vec![2, 5],
        },
    ];
    for k in [5, 10] {
        let kl = kl_at_k(&lists, k, KL_SMOOTHING)?;
        println!(
            "CC@{k} {:.4}  KL@{k} {:.4} over {} lists ({} without history)",
            category_coverage(&lists, k, 6)?,
            kl.value.unwrap_or(f64::NAN),
            kl.sessions,
            kl.skipped
        );
    }
    Ok(())
}
