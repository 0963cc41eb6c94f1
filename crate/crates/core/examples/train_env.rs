//! Fits the simulation environment to logged sessions and compares its
//! held-out log-loss with that of the true world.
//!
//! cargo run --release --example train_env [sessions]

use cterank::config::RunConfig;
use cterank::dataset::{generate_synthetic, GenerateConfig};
use cterank::simenv::{position_log_loss, train_env};

fn main() -> cterank::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(5000, |s| s.parse().expect("sessions is an integer"));
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/fidelity.toml"))?;
    let world = cfg.world.build()?;
    let gen = cfg.generate();
    let train = generate_synthetic(&world, &GenerateConfig { sessions: n, ..gen.clone() })?;
    let test = generate_synthetic(
        &world,
        &GenerateConfig {
            seed: gen.seed + 1,
            sessions: 2000,
            ..gen
        },
    )?;
    let fit = train_env(&train, &cfg.env_train())?;
    for e in &fit.epochs {
        println!("epoch {:>2}  train {:.4}  held-out {:.4}", e.epoch, e.train_loss, e.heldout_loss);
    }
    let se = position_log_loss(&fit.model, &test)?;
    let bayes = world.log_loss(&test)?;
    println!("test log-loss {se:.4}  Bayes {bayes:.4}  gap {:.2}%", 100.0 * (se - bayes) / bayes);
    Ok(())
}
