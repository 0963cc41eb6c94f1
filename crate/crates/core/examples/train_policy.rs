//! REINFORCE with the sampled baseline on a world small enough to enumerate,
//! compared with the optimum and the greedy baselines.
//!
//! cargo run --release --example train_policy [seed]

use cterank::config::{stream, RunConfig};
use cterank::data::Item;
use cterank::oracle::{list_cte, optimal_ranking};
use cterank::policy::{greedy_ctr_rank, weighted_greedy_rank, PolicyModel};
use cterank::trainer::{evaluate_policy, train_policy, Start, TrainConfig};

fn main() -> cterank::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed is an integer"));
    let cfg = RunConfig {
        seed,
        ..RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/tiny6.toml"))?
    };
    let world = cfg.world.build()?;
    let k = cfg.policy.train.k;
    let starts: Vec<Start> = world
        .users
        .iter()
        .map(|u| Start {
            user: u.clone(),
            pool: world.items.clone(),
        })
        .collect();

    let mean = |f: &dyn Fn(&Start) -> cterank::Result<f64>| -> cterank::Result<f64> {
        Ok(starts.iter().map(f).sum::<cterank::Result<f64>>()? / starts.len() as f64)
    };
    let ranked = |s: &Start, order: Vec<usize>| {
        let list: Vec<&Item> = order.iter().map(|&i| &s.pool[i]).collect();
        list_cte(&world, &s.user, &list)
    };
    let optimal = mean(&|s| Ok(optimal_ranking(&world, &s.user, &s.pool, k)?.cte))?;
    let greedy = mean(&|s| ranked(s, greedy_ctr_rank(&world, &s.user, &s.pool_refs(), k)?))?;
    println!("optimal {optimal:.4}  greedy CTR {greedy:.4}");
    for &a in &cfg.eval.alphas {
        let w = mean(&|s| ranked(s, weighted_greedy_rank(&world, &s.user, &s.pool_refs(), k, a, false)?))?;
        println!("WGCAR alpha={a} {w:.4}");
    }

    let policy = PolicyModel::new(
        world.user_dim(),
        world.item_dim(),
        cfg.policy.shape.clone(),
        cfg.stage_seed(stream::POLICY_INIT),
    )?;
    let tc = TrainConfig {
        target_cte: Some(0.98 * optimal),
        ..cfg.policy_train()
    };
    let run = train_policy(policy, &world, &starts, &starts, &tc)?;
    for p in &run.curve {
        println!("iter {:>5}  mean return {:.4}  eval {:.4}", p.iteration, p.mean_return, p.eval_cte.unwrap_or(f64::NAN));
    }
    println!(
        "policy {:.4} after {} iterations (target reached: {})",
        evaluate_policy(&run.model, &world, &starts, k)?,
        run.iterations,
        run.reached_at.is_some()
    );
    Ok(())
}
