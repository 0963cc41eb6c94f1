//! REINFORCE training of the ranking policy against a frozen environment.
//!
//! Each iteration samples a mini-batch of initial states, rolls out
//! `n_traj` trajectories from each, turns rewards into returns, subtracts a
//! baseline and takes one clipped Adagrad ascent step on
//! `sum_t G'_t * grad log pi(a_t | s_t)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Item, Trajectory, TrajectoryStep, User};
use crate::env::EnvScorer;
use crate::error::{Error, Result};
use crate::nn::Grads;
use crate::oracle::list_cte;
use crate::policy::{decode_incremental, sample_index, PolicyModel, PolicyTape};

/// Initial state of an episode: a user and the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub user: User,
    pub pool: Vec<Item>,
}

impl Start {
    pub fn pool_refs(&self) -> Vec<&Item> {
        self.pool.iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Leave-one-out mean return of the other trajectories from the same state.
    #[default]
    Sampled,
    /// Returns standardized over all steps of the mini-batch.
    Whitening,
    None,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "whitening" => Ok(Self::Whitening),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("baseline must be sampled, whitening or none, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adagrad,
    Sgd,
}

/// How rewards and transitions are drawn from the environment's estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutMode {
    /// Reward is a Bernoulli(CTR) click instead of the expected click.
    pub sample_clicks: bool,
    /// Never terminate; weight each reward by the probability of still
    /// being in the session instead.
    pub expected_bounce: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Rank size.
    pub k: usize,
    /// Trajectories per initial state.
    pub n_traj: usize,
    pub gamma: f64,
    pub lr: f64,
    pub baseline: BaselineMode,
    /// Initial states per iteration.
    pub batch: usize,
    pub max_iters: usize,
    /// Derived from the run seed rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub rollout: RolloutMode,
    /// Evaluate the greedy policy every this many iterations (0 disables).
    pub eval_every: usize,
    /// Stop once the evaluation CTE reaches this value.
    pub target_cte: Option<f64>,
    /// Stop after this many evaluations without improvement (0 disables).
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_traj: 8,
            gamma: 1.0,
            lr: 1e-3,
            baseline: BaselineMode::Sampled,
            batch: 4,
            max_iters: 2000,
            seed: 0,
            clip_norm: 5.0,
            optimizer: Optimizer::Adagrad,
            rollout: RolloutMode::default(),
            eval_every: 100,
            target_cte: None,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_traj == 0 || self.batch == 0 {
            return Err(Error::Config("k, n_traj and batch must be positive".into()));
        }
        if self.baseline == BaselineMode::Sampled && self.n_traj < 2 {
            return Err(Error::Config("the sampled baseline needs n_traj >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `G_t = r_t + gamma * G_{t+1}`, computed backwards.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Standardizes returns with the population standard deviation; when that
/// is below `1e-8` the returns are only centered.
pub fn whitening_baseline(g: &[f64]) -> Vec<f64> {
    if g.is_empty() {
        return Vec::new();
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        g.iter().map(|x| x - mean).collect()
    } else {
        g.iter().map(|x| (x - mean) / std).collect()
    }
}

/// Leave-one-out baseline over the trajectories of one initial state:
/// `G'^j_t = G^j_t - mean_{b != j} G^b_t`, where a trajectory that already
/// ended contributes `G^b_t = 0`.
pub fn sampled_baseline(group: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = group.len();
    if n < 2 {
        return Err(Error::Config(format!("the sampled baseline needs at least 2 trajectories, got {n}")));
    }
    let horizon = group.iter().map(Vec::len).max().unwrap_or(0);
    let mut totals = vec![0.0; horizon];
    for g in group {
        for (t, v) in g.iter().enumerate() {
            totals[t] += v;
        }
    }
    Ok(group
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(t, &v)| v - (totals[t] - v) / (n - 1) as f64)
                .collect()
        })
        .collect())
}

/// Fills `adjusted` on every trajectory. Trajectories are grouped by
/// consecutive runs of `n_traj` for the sampled baseline.
pub fn apply_baseline(trajs: &mut [Trajectory], mode: BaselineMode, n_traj: usize) -> Result<()> {
    match mode {
        BaselineMode::None => {
            for t in trajs.iter_mut() {
                t.adjusted = t.returns.clone();
            }
        }
        BaselineMode::Whitening => {
            let all: Vec<f64> = trajs.iter().flat_map(|t| t.returns.iter().copied()).collect();
            let w = whitening_baseline(&all);
            let mut it = w.into_iter();
            for t in trajs.iter_mut() {
                t.adjusted = it.by_ref().take(t.returns.len()).collect();
            }
        }
        BaselineMode::Sampled => {
            if n_traj == 0 || !trajs.len().is_multiple_of(n_traj) {
                return Err(Error::Contract(format!(
                    "{} trajectories do not split into groups of {n_traj}",
                    trajs.len()
                )));
            }
            for group in trajs.chunks_mut(n_traj) {
                let g: Vec<Vec<f64>> = group.iter().map(|t| t.returns.clone()).collect();
                for (t, adj) in group.iter_mut().zip(sampled_baseline(&g)?) {
                    t.adjusted = adj;
                }
            }
        }
    }
    Ok(())
}

fn check_capacity<E: EnvScorer + ?Sized>(env: &E, start: &Start, k: usize) -> Result<()> {
    if k > start.pool.len() {
        return Err(Error::Argument(format!("rank size {k} exceeds pool size {}", start.pool.len())));
    }
    if let Some(max) = env.max_len() {
        if k > max {
            return Err(Error::Capacity(format!("rank size {k} exceeds environment capacity {max}")));
        }
    }
    Ok(())
}

/// Samples one episode, recording the policy's log-probabilities on a tape.
/// Returns are filled in; `adjusted` is left empty.
pub fn rollout_tape<'m, E: EnvScorer + ?Sized>(
    policy: &'m PolicyModel,
    env: &E,
    start: &Start,
    start_index: usize,
    k: usize,
    gamma: f64,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, PolicyTape<'m>)> {
    check_capacity(env, start, k)?;
    let pool = start.pool_refs();
    let mut tape = PolicyTape::new(policy, &start.user, &pool)?;
    let mut mask = vec![false; pool.len()];
    let mut history: Vec<&Item> = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);
    let mut survival = 1.0;
    for _ in 0..k {
        let probs = tape.distribution(&mask)?;
        let action = sample_index(&probs, &mask, rng)?;
        let log_prob = tape.commit(&mask, action)?;
        let est = env.rollout_estimate(&start.user, &history, pool[action])?;
        let click = if mode.sample_clicks {
            if rng.gen::<f64>() < est.ctr {
                1.0
            } else {
                0.0
            }
        } else {
            est.ctr
        };
        let (reward, bounced) = if mode.expected_bounce {
            let r = survival * click;
            survival *= 1.0 - est.pbr;
            (r, false)
        } else {
            (click, rng.gen::<f64>() < est.pbr)
        };
        mask[action] = true;
        history.push(pool[action]);
        steps.push(TrajectoryStep {
            action,
            log_prob,
            ctr: est.ctr,
            pbr: est.pbr,
            reward,
            bounced,
        });
        if bounced {
            break;
        }
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let traj = Trajectory {
        start: start_index,
        returns: returns(&rewards, gamma),
        steps,
        adjusted: Vec::new(),
    };
    Ok((traj, tape))
}

/// Samples one episode of at most `k` steps.
pub fn rollout<E: EnvScorer + ?Sized>(
    policy: &PolicyModel,
    env: &E,
    start: &Start,
    k: usize,
    gamma: f64,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    rollout_tape(policy, env, start, 0, k, gamma, mode, rng).map(|(t, _)| t)
}

/// Rebuilds the tape of a recorded trajectory by replaying its actions.
pub fn replay_tape<'m>(policy: &'m PolicyModel, start: &Start, traj: &Trajectory) -> Result<PolicyTape<'m>> {
    let pool = start.pool_refs();
    let mut tape = PolicyTape::new(policy, &start.user, &pool)?;
    let mut mask = vec![false; pool.len()];
    for s in &traj.steps {
        tape.distribution(&mask)?;
        tape.commit(&mask, s.action)?;
        mask[s.action] = true;
    }
    Ok(tape)
}

/// `sum_t coef_t * grad log pi(a_t | s_t)` for one recorded episode.
pub fn weighted_log_prob_grad(tape: &PolicyTape<'_>, coefs: &[f64]) -> Grads {
    let seeds: Vec<_> = tape.log_probs.iter().copied().zip(coefs.iter().copied()).collect();
    tape.graph.backward(&seeds).into_params()
}

/// Mean over trajectories of `sum_t G'_t * grad log pi`, summed in a fixed
/// order.
pub fn batch_gradient(policy: &PolicyModel, tapes: &[PolicyTape<'_>], trajs: &[Trajectory]) -> Grads {
    let parts: Vec<Grads> = tapes
        .par_iter()
        .zip(trajs.par_iter())
        .map(|(tape, t)| weighted_log_prob_grad(tape, &t.adjusted))
        .collect();
    let mut total = policy.params.zero_grads();
    for p in &parts {
        total.add_assign(p);
    }
    if !trajs.is_empty() {
        total.scale(1.0 / trajs.len() as f64);
    }
    total
}

/// Gradient ascent on the policy from an ascent direction; clips the norm
/// first. Returns the norm before clipping.
pub fn ascend(policy: &mut PolicyModel, mut grad: Grads, lr: f64, clip_norm: f64, optimizer: Optimizer) -> Result<f64> {
    grad.scale(-1.0);
    let norm = grad.clip_norm(clip_norm);
    match optimizer {
        Optimizer::Adagrad => policy.params.adagrad_step(&grad, lr)?,
        Optimizer::Sgd => policy.params.sgd_step(&grad, lr)?,
    }
    Ok(norm)
}

/// One REINFORCE update from recorded trajectories whose `adjusted` returns
/// are filled in. `starts[t.start]` must be the initial state of `t`.
pub fn policy_gradient_step(
    policy: &mut PolicyModel,
    starts: &[Start],
    trajs: &[Trajectory],
    lr: f64,
    clip_norm: f64,
    optimizer: Optimizer,
) -> Result<f64> {
    let grad = {
        let tapes = trajs
            .iter()
            .map(|t| {
                let s = starts
                    .get(t.start)
                    .ok_or_else(|| Error::Contract(format!("trajectory start {} out of range", t.start)))?;
                replay_tape(policy, s, t)
            })
            .collect::<Result<Vec<_>>>()?;
        batch_gradient(policy, &tapes, trajs)
    };
    ascend(policy, grad, lr, clip_norm, optimizer)
}

/// Greedy-decoded ranking of one start.
pub fn policy_ranking(policy: &PolicyModel, start: &Start, k: usize) -> Result<Vec<usize>> {
    Ok(decode_incremental(policy, &start.user, &start.pool_refs(), k)?.order)
}

/// Mean analytic CTE (under `env`) of the greedy-decoded policy.
pub fn evaluate_policy<E: EnvScorer + ?Sized>(policy: &PolicyModel, env: &E, starts: &[Start], k: usize) -> Result<f64> {
    if starts.is_empty() {
        return Err(Error::Argument("evaluation needs at least one start".into()));
    }
    let ctes = starts
        .par_iter()
        .map(|s| {
            let order = policy_ranking(policy, s, k)?;
            let list: Vec<&Item> = order.iter().map(|&i| &s.pool[i]).collect();
            list_cte(env, &s.user, &list)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ctes.iter().sum::<f64>() / starts.len() as f64)
}

/// Independent RNG for trajectory `index` of iteration `iteration`.
pub fn trajectory_rng(seed: u64, iteration: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng.set_stream(index as u64 + 1);
    rng
}

/// Rolls out `n_traj` trajectories for each start in `batch` (indices into
/// `starts`), in parallel with per-trajectory RNG streams.
fn rollout_batch<'m, E: EnvScorer + ?Sized>(
    policy: &'m PolicyModel,
    env: &E,
    starts: &[Start],
    batch: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(Vec<Trajectory>, Vec<PolicyTape<'m>>)> {
    let jobs: Vec<(usize, usize)> = batch
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, cfg.n_traj))
        .enumerate()
        .collect();
    let out = jobs
        .par_iter()
        .map(|&(j, s)| {
            let mut rng = trajectory_rng(cfg.seed, iteration, j);
            rollout_tape(policy, env, &starts[s], s, cfg.k, cfg.gamma, cfg.rollout, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean `G_0` over the iterations since the previous point.
    pub mean_return: f64,
    pub eval_cte: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub model: PolicyModel,
    pub curve: Vec<CurvePoint>,
    pub iterations: usize,
    /// First evaluated iteration at which `target_cte` was reached.
    pub reached_at: Option<usize>,
}

/// Trains `policy` with REINFORCE on initial states drawn from `starts`,
/// evaluating the greedy policy on `eval_starts`.
pub fn train_policy<E: EnvScorer + ?Sized>(
    mut policy: PolicyModel,
    env: &E,
    starts: &[Start],
    eval_starts: &[Start],
    cfg: &TrainConfig,
) -> Result<PolicyTraining> {
    cfg.validate()?;
    if starts.is_empty() {
        return Err(Error::Argument("policy training needs at least one initial state".into()));
    }
    for s in starts.iter().chain(eval_starts) {
        check_capacity(env, s, cfg.k)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let mut reached_at = None;
    let mut best_eval = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut ret_sum = 0.0;
    let mut ret_n = 0usize;
    let mut iterations = 0;
    let all: Vec<usize> = (0..starts.len()).collect();
    for it in 1..=cfg.max_iters {
        let batch: Vec<usize> = if starts.len() <= cfg.batch {
            (0..cfg.batch).map(|b| b % starts.len()).collect()
        } else {
            all.choose_multiple(&mut rng, cfg.batch).copied().collect()
        };
        let grad = {
            let (mut trajs, tapes) = rollout_batch(&policy, env, starts, &batch, cfg, it)?;
            for t in &trajs {
                ret_sum += t.returns.first().copied().unwrap_or(0.0);
                ret_n += 1;
            }
            apply_baseline(&mut trajs, cfg.baseline, cfg.n_traj)?;
            batch_gradient(&policy, &tapes, &trajs)
        };
        ascend(&mut policy, grad, cfg.lr, cfg.clip_norm, cfg.optimizer)
            .map_err(|e| Error::Divergence(format!("iteration {it}: {e}")))?;
        iterations = it;

        if cfg.eval_every > 0 && (it % cfg.eval_every == 0 || it == cfg.max_iters) {
            let eval_cte = if eval_starts.is_empty() {
                None
            } else {
                Some(evaluate_policy(&policy, env, eval_starts, cfg.k)?)
            };
            curve.push(CurvePoint {
                iteration: it,
                mean_return: ret_sum / ret_n.max(1) as f64,
                eval_cte,
            });
            ret_sum = 0.0;
            ret_n = 0;
            if let Some(e) = eval_cte {
                if cfg.target_cte.is_some_and(|t| e >= t) {
                    reached_at = Some(it);
                    break;
                }
                if e > best_eval {
                    best_eval = e;
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(PolicyTraining {
        model: policy,
        curve,
        iterations,
        reached_at,
    })
}

/// Trace of the covariance of the per-group gradient estimate, for each
/// baseline mode, measured on the same rollout groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientVariance {
    pub groups: usize,
    pub none: f64,
    pub sampled: f64,
    pub whitening: f64,
}

/// Rolls out `groups` groups of `cfg.n_traj` trajectories on a frozen policy
/// (starts used round-robin) and measures the spread of the resulting
/// gradient estimates under each baseline.
pub fn gradient_variance<E: EnvScorer + ?Sized>(
    policy: &PolicyModel,
    env: &E,
    starts: &[Start],
    cfg: &TrainConfig,
    groups: usize,
) -> Result<GradientVariance> {
    if starts.is_empty() || groups < 2 || cfg.n_traj < 2 {
        return Err(Error::Argument("variance needs starts, >= 2 groups and n_traj >= 2".into()));
    }
    let dim = policy.params.num_scalars();
    let modes = [BaselineMode::None, BaselineMode::Sampled, BaselineMode::Whitening];
    let mut mean = vec![vec![0.0; dim]; 3];
    let mut m2 = vec![vec![0.0; dim]; 3];
    for g in 0..groups {
        let s = g % starts.len();
        let (mut trajs, tapes) = rollout_batch(policy, env, starts, &[s], cfg, g + 1)?;
        for (m, &mode) in modes.iter().enumerate() {
            apply_baseline(&mut trajs, mode, cfg.n_traj)?;
            let est = batch_gradient(policy, &tapes, &trajs).flatten();
            let n = (g + 1) as f64;
            for (i, x) in est.into_iter().enumerate() {
                let d = x - mean[m][i];
                mean[m][i] += d / n;
                m2[m][i] += d * (x - mean[m][i]);
            }
        }
    }
    let trace = |m: usize| m2[m].iter().sum::<f64>() / (groups - 1) as f64;
    Ok(GradientVariance {
        groups,
        none: trace(0),
        sampled: trace(1),
        whitening: trace(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvEstimate, FnScorer};
    use crate::policy::PolicyShape;

    fn start(n: usize) -> Start {
        Start {
            user: User {
                id: "u".into(),
                features: vec![1.0, 0.2],
            },
            pool: (0..n)
                .map(|i| Item {
                    id: format!("i{i}"),
                    features: vec![(i as f64).sin(), 0.3 * i as f64],
                    category: 0,
                })
                .collect(),
        }
    }

    fn policy() -> PolicyModel {
        let shape = PolicyShape {
            d_model: 4,
            fusion_hidden: vec![6],
            ..Default::default()
        };
        PolicyModel::new(2, 2, shape, 5).unwrap()
    }

    fn const_env(ctr: f64, pbr: f64) -> impl EnvScorer {
        FnScorer(move |_: &User, _: &[&Item]| EnvEstimate { ctr, pbr })
    }

    #[test]
    fn returns_examples() {
        assert_eq!(returns(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(returns(&[0.7], 0.3), vec![0.7]);
        assert_eq!(returns(&[1.0, 1.0], 0.5), vec![1.5, 1.0]);
    }

    #[test]
    fn whitening_examples() {
        assert_eq!(whitening_baseline(&[0.0, 2.0]), vec![-1.0, 1.0]);
        assert_eq!(whitening_baseline(&[4.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn sampled_examples() {
        let out = sampled_baseline(&[vec![3.0], vec![1.0]]).unwrap();
        assert_eq!(out, vec![vec![2.0], vec![-2.0]]);
        let same = sampled_baseline(&vec![vec![1.0, 0.5]; 3]).unwrap();
        assert!(same.iter().flatten().all(|&v| v == 0.0));
        assert!(matches!(sampled_baseline(&[vec![1.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn rollout_lengths_follow_bounce() {
        let p = policy();
        let s = start(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(rollout(&p, &const_env(0.3, 1.0), &s, 4, 1.0, RolloutMode::default(), &mut rng).unwrap().len(), 1);
            let t = rollout(&p, &const_env(0.3, 0.0), &s, 4, 1.0, RolloutMode::default(), &mut rng).unwrap();
            assert_eq!(t.len(), 4);
            let mut a = t.actions();
            a.sort_unstable();
            a.dedup();
            assert_eq!(a.len(), 4);
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let p = policy();
        let s = start(5);
        let env = const_env(0.4, 0.3);
        let a = rollout(&p, &env, &s, 4, 1.0, RolloutMode::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = rollout(&p, &env, &s, 4, 1.0, RolloutMode::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_adjusted_returns_leave_policy_unchanged() {
        let mut p = policy();
        let before = p.params.flatten();
        let s = vec![start(4)];
        let mut t = rollout(&p, &const_env(0.5, 0.2), &s[0], 3, 1.0, RolloutMode::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        t.adjusted = vec![0.0; t.len()];
        policy_gradient_step(&mut p, &s, &[t], 0.1, 5.0, Optimizer::Adagrad).unwrap();
        assert_eq!(p.params.flatten(), before);
    }

    #[test]
    fn zero_lr_leaves_policy_unchanged() {
        let p = policy();
        let before = p.params.flatten();
        let cfg = TrainConfig {
            k: 2,
            lr: 0.0,
            max_iters: 5,
            eval_every: 0,
            ..Default::default()
        };
        let out = train_policy(p, &const_env(0.5, 0.2), &[start(4)], &[], &cfg).unwrap();
        assert_eq!(out.model.params.flatten(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            k: 2,
            lr: 0.05,
            max_iters: 10,
            eval_every: 5,
            batch: 2,
            n_traj: 3,
            ..Default::default()
        };
        let env = FnScorer(|_: &User, h: &[&Item]| EnvEstimate {
            ctr: 0.5 + 0.4 * h.last().unwrap().features[0],
            pbr: 0.2,
        });
        let starts = vec![start(4), start(5)];
        let a = train_policy(policy(), &env, &starts, &starts, &cfg).unwrap();
        let b = train_policy(policy(), &env, &starts, &starts, &cfg).unwrap();
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        assert_eq!(a.curve, b.curve);
        assert_ne!(a.model.params.flatten(), policy().params.flatten());
    }

    #[test]
    fn sampled_baseline_needs_two_trajectories() {
        let cfg = TrainConfig {
            n_traj: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
