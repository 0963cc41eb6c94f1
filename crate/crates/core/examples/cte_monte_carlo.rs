//! Closed-form CTE against Monte-Carlo rollouts of the click/bounce process.
//!
//! cargo run --release --example cte_monte_carlo

use cterank::oracle::{cte, mc_cte, CteProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cterank::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..8 {
        let t = rng.gen_range(1..=8);
        let ctr: Vec<f64> = (0..t).map(|_| rng.gen()).collect();
        let pbr: Vec<f64> = (0..t).map(|_| rng.gen()).collect();
        let p = CteProfile::new(ctr, pbr)?;
        let exact = cte(&p);
        let mc = mc_cte(&p, 100_000, i)?;
        println!(
            "T={t}  exact {exact:.4}  mc {:.4} +- {:.4}  z {:+.2}",
            mc.mean,
            mc.std_error,
            (mc.mean - exact) / mc.std_error
        );
    }
    Ok(())
}
