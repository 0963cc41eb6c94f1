//! Session datasets: learning-to-rank conversion with MMR bounce labels, and
//! a synthetic world with known click and bounce probabilities.

pub mod bounce;
pub mod ltr;
pub mod synthetic;
pub mod yahoo;

pub use bounce::{bounce_labels, decay_rate, exposure_order, mmr, BounceConfig, BounceLabels};
pub use ltr::{click_label, parse_ltr, parse_ltr_str, LtrExample};
pub use synthetic::{generate_synthetic, GenerateConfig, LoggingPolicy, SyntheticWorld, WorldConfig};
pub use yahoo::{build_yahoo_sessions, build_yahoo_with_fitted_scorer, LogisticScorer, PointwiseScorer, YahooConfig};
