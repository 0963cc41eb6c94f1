//! Incremental decoding (one fusion pass, one GRU sweep per slot) against
//! re-running the whole prefix at every slot.
//!
//! cargo run --release --example serving

use cterank::data::{Item, User};
use cterank::policy::{decode_incremental, decode_naive, PolicyModel, PolicyShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> cterank::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let model = PolicyModel::new(4, 8, PolicyShape::default(), 7)?;
    let user = User {
        id: "u".into(),
        features: normal(4),
    };
    let pool: Vec<Item> = (0..200)
        .map(|i| Item {
            id: format!("i{i}"),
            features: normal(8),
            category: 0,
        })
        .collect();
    let refs: Vec<&Item> = pool.iter().collect();
    for k in [4, 8, 16, 32] {
        let inc = decode_incremental(&model, &user, &refs, k)?;
        let naive = decode_naive(&model, &user, &refs, k)?;
        assert_eq!(inc.order, naive.order);
        println!(
            "k={k:>2}  incremental {:>8.2?}  naive {:>8.2?}  ratio {:.1}",
            inc.elapsed,
            naive.elapsed,
            naive.elapsed.as_secs_f64() / inc.elapsed.as_secs_f64()
        );
    }
    Ok(())
}
