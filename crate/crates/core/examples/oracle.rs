//! Exhaustive CTE-optimal ranking against greedy CTR on a world with a trap
//! item: high click rate but almost certain to end the session.
//!
//! cargo run --release --example oracle

use cterank::config::RunConfig;
use cterank::data::Item;
use cterank::oracle::{list_cte, optimal_ranking};
use cterank::policy::greedy_ctr_rank;
use cterank::EnvScorer;

fn main() -> cterank::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/demo4.toml"))?;
    let world = cfg.world.build()?;
    let user = &world.users[0];
    let depth = cfg.oracle.depth;

    for item in &world.items {
        let e = world.estimate(user, &[item])?;
        println!("{:>2}  ctr {:.3}  pbr {:.3}", item.id, e.ctr, e.pbr);
    }

    let best = optimal_ranking(&world, user, &world.items, depth)?;
    let pool: Vec<&Item> = world.items.iter().collect();
    let greedy = greedy_ctr_rank(&world, user, &pool, depth)?;
    let greedy_list: Vec<&Item> = greedy.iter().map(|&i| pool[i]).collect();
    let greedy_cte = list_cte(&world, user, &greedy_list)?;

    let ids = |order: &[usize]| order.iter().map(|&i| pool[i].id.as_str()).collect::<Vec<_>>().join(" ");
    println!("optimal     {}  CTE {:.4}", ids(&best.order), best.cte);
    println!("greedy CTR  {}  CTE {:.4}", ids(&greedy), greedy_cte);
    println!("gap {:.1}%", 100.0 * (best.cte - greedy_cte) / greedy_cte);
    Ok(())
}
