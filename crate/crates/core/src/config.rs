//! Run configuration: one TOML document covering every stage. Unknown keys
//! are rejected; command-line flags override file values; the resolved
//! configuration is echoed into every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GenerateConfig, WorldConfig, YahooConfig};
use crate::error::{Error, Result};
use crate::metrics::KL_SMOOTHING;
use crate::policy::PolicyShape;
use crate::simenv::EnvTrainConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: GenerateConfig,
    pub yahoo: YahooConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub shape: PolicyShape,
    pub train: TrainConfig,
    /// Number of synthetic initial states when training from a world.
    pub starts: usize,
    /// Held-out initial states used for evaluation during training.
    pub eval_starts: usize,
    /// Replace the environment's bounce estimate with this constant.
    pub constant_pbr: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            shape: PolicyShape::default(),
            train: TrainConfig::default(),
            starts: 200,
            eval_starts: 50,
            constant_pbr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    /// Rank size used for CTE, AC and AD.
    pub k: usize,
    pub kl_smoothing: f64,
    /// WGCAR weights to sweep.
    pub alphas: Vec<f64>,
    /// Use the printed WGCAR score that adds the bounce probability.
    pub wgcar_literal: bool,
    /// Total number of categories for CC@K (0 = count those in the data).
    pub n_categories: usize,
    /// Simulated sessions per logged session for AC and AD.
    pub rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: vec![5, 10],
            k: 10,
            kl_smoothing: KL_SMOOTHING,
            alphas: vec![0.8, 0.6],
            wgcar_literal: false,
            n_categories: 0,
            rollouts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub pool_size: usize,
    pub depth: usize,
    /// Number of (user, pool) instances to enumerate.
    pub instances: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            pool_size: 6,
            depth: 3,
            instances: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n: usize,
    pub k_list: Vec<usize>,
    pub repeats: usize,
    pub user_dim: usize,
    pub item_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 200,
            k_list: vec![4, 8, 16],
            repeats: 5,
            user_dim: 4,
            item_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Every random stream of a run is derived from this seed.
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub env: EnvTrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
    pub bench: BenchConfig,
}


/// Stage offsets keep the per-stage streams distinct.
pub mod stream {
    pub const GENERATE: u64 = 1;
    pub const ENV: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const POLICY_TRAIN: u64 = 4;
    pub const STARTS: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const ORACLE: u64 = 7;
    pub const BENCH: u64 = 8;
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Seed of one stage, derived from the run seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stage.wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }

    /// Stage configurations with their derived seeds filled in.
    pub fn generate(&self) -> GenerateConfig {
        GenerateConfig {
            seed: self.stage_seed(stream::GENERATE),
            ..self.data.synthetic.clone()
        }
    }

    pub fn env_train(&self) -> EnvTrainConfig {
        EnvTrainConfig {
            seed: self.stage_seed(stream::ENV),
            ..self.env.clone()
        }
    }

    pub fn policy_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stream::POLICY_TRAIN),
            ..self.policy.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy_train().validate()?;
        self.data.yahoo.bounce.validate()?;
        if self.eval.k_list.contains(&0) || self.eval.k == 0 {
            return Err(Error::Config("evaluation ranks must be positive".into()));
        }
        if !(self.eval.kl_smoothing > 0.0 && self.eval.kl_smoothing < 1.0) {
            return Err(Error::Config(format!("kl_smoothing {} outside (0, 1)", self.eval.kl_smoothing)));
        }
        if let Some(a) = self.eval.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("WGCAR alpha {a} outside [0, 1]")));
        }
        if let Some(p) = self.policy.constant_pbr {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("constant_pbr {p} outside [0, 1]")));
            }
        }
        if self.eval.rollouts == 0 {
            return Err(Error::Config("eval.rollouts must be positive".into()));
        }
        Ok(())
    }
}
