//! The GRU ranking policy, its serving paths, and the greedy baselines.

mod baselines;
mod decode;
mod model;

pub use baselines::{greedy_ctr_rank, weighted_greedy_rank};
pub use decode::{decode_incremental, decode_naive, Decoded};
pub use model::{
    argmax_unmasked, sample_index, CarryMode, FusionCache, Pick, PolicyModel, PolicyShape, PolicyState, PolicyTape,
    StepOutcome, Sweep,
};
