//! Session re-ranking for click-through expectation (CTE): the expected
//! number of clicks a user makes before bouncing out of a feed.
//!
//! The crate bundles
//! * [`nn`]: a small tape-based autodiff with FM-cross fusion, GRU, a
//!   single-head transformer block and Adagrad;
//! * [`data`] and [`dataset`]: session logs, the learning-to-rank to session
//!   conversion with MMR-driven bounce labels, and a synthetic world with
//!   known click and bounce probabilities;
//! * [`simenv`]: the learned simulation environment estimating conditional
//!   CTR and PBR;
//! * [`oracle`]: exact CTE, brute-force optimal rankings and Monte-Carlo CTE;
//! * [`policy`] and [`trainer`]: the GRU ranking policy, greedy baselines,
//!   incremental serving and REINFORCE training;
//! * [`metrics`]: AC, AD, CC@K and KL@K;
//! * [`commands`]: the subcommands behind the `cterank` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod dataset;
pub mod env;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod simenv;
pub mod trainer;

pub use env::{EnvEstimate, EnvScorer};
pub use error::{Error, Result};
