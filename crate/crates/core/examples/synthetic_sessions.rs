//! Sessions sampled from a generated world under a uniform logging policy.
//!
//! cargo run --release --example synthetic_sessions

use cterank::config::RunConfig;
use cterank::dataset::{generate_synthetic, GenerateConfig};
use cterank::metrics::{average_clicks, average_depth};

fn main() -> cterank::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/fidelity.toml"))?;
    let world = cfg.world.build()?;
    let sessions = generate_synthetic(
        &world,
        &GenerateConfig {
            sessions: 5000,
            ..cfg.generate()
        },
    )?;
    let censored = sessions.iter().filter(|s| s.censored).count();
    println!(
        "{} users, {} items, {} sessions",
        world.users.len(),
        world.items.len(),
        sessions.len()
    );
    println!(
        "AC {:.3}  AD {:.3}  censored {:.1}%",
        average_clicks(&sessions)?,
        average_depth(&sessions)?,
        100.0 * censored as f64 / sessions.len() as f64
    );
    println!("Bayes log-loss {:.4}", world.log_loss(&sessions)?);
    Ok(())
}
