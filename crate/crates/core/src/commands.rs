//! The subcommands behind the `cterank` binary.
//!
//! Every artifact carries the fully resolved run configuration: JSON reports
//! embed it under `"config"`, other outputs get a `<out>.run.toml` sidecar.
//! Paths never enter the echo, so reruns into other directories stay
//! byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{stream, RunConfig};
use crate::data::{load_sessions, save_sessions, Item, SessionRecord, User};
use crate::dataset::synthetic::sample_start;
use crate::dataset::{build_yahoo_with_fitted_scorer, generate_synthetic, parse_ltr, SyntheticWorld};
use crate::env::{simulate_session, ConstantPbr, EnvScorer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate as evaluate_metrics, EvalReport, RankedList};
use crate::oracle::{list_cte, optimal_ranking};
use crate::policy::{
    decode_incremental, decode_naive, greedy_ctr_rank, weighted_greedy_rank, CarryMode, PolicyModel,
};
use crate::simenv::{train_env, SimEnvModel};
use crate::trainer::{policy_ranking, train_policy, BaselineMode, Start};

#[derive(Debug, Parser)]
#[command(name = "cterank", version, about = "Re-ranking for expected clicks before bounce")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a session log from an LTR file or a synthetic world.
    #[command(subcommand)]
    GenData(GenData),
    /// Fit the simulation environment to a session log.
    TrainEnv(TrainEnvArgs),
    /// Train the ranking policy with REINFORCE.
    TrainPolicy(TrainPolicyArgs),
    /// Compare the policy with the greedy baselines.
    Evaluate(EvaluateArgs),
    /// Enumerate optimal rankings on small pools.
    Oracle(OracleArgs),
    /// Rank the candidates of every logged session.
    Rank(RankArgs),
    /// Time incremental against naive decoding.
    BenchServing(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum GenData {
    /// Sessions from a learning-to-rank file with MMR bounce labels.
    Yahoo(YahooArgs),
    /// Sessions sampled from a synthetic world.
    Synthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct YahooArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Dense feature dimension of the input.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Configuration file; its `[world]` table defines the world.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take the world from this file instead of `--config`.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEnvArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch losses as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Sampled,
    Whitening,
    None,
}

impl From<BaselineArg> for BaselineMode {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Sampled => Self::Sampled,
            BaselineArg::Whitening => Self::Whitening,
            BaselineArg::None => Self::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CarryArg {
    Last,
    Chosen,
}

#[derive(Debug, Args)]
pub struct EnvSource {
    /// Simulation environment checkpoint.
    #[arg(long, conflicts_with = "world")]
    pub env: Option<PathBuf>,
    /// Configuration file whose `[world]` table is used as the environment.
    #[arg(long)]
    pub world: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    #[command(flatten)]
    pub source: EnvSource,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub carry: Option<CarryArg>,
    #[arg(long)]
    pub constant_pbr: Option<f64>,
    #[arg(long)]
    pub sample_clicks: bool,
    #[arg(long)]
    pub expected_bounce: bool,
    /// Training curve as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub source: EnvSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Rank size for CTE, AC and AD.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub wgcar_literal: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub source: EnvSource,
    /// Sessions providing the candidates when using `--env`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub wgcar_literal: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    Incremental,
    Naive,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Adds the environment's CTE of each ranking to the output.
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "incremental")]
    pub mode: DecodeMode,
    /// Rankings as JSON lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(GenData::Yahoo(a)) => gen_yahoo(a),
        Command::GenData(GenData::Synthetic(a)) => gen_synthetic(a),
        Command::TrainEnv(a) => cmd_train_env(a),
        Command::TrainPolicy(a) => cmd_train_policy(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Rank(a) => cmd_rank(a),
        Command::BenchServing(a) => cmd_bench(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// `--config`, or else the world file, which may carry other tables too.
fn config_or_world(config: Option<&Path>, world: Option<&Path>) -> Result<RunConfig> {
    load_config(config.or(world))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Path of the configuration echo written next to `out`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.toml");
    out.with_file_name(name)
}

fn write_sidecar(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&sidecar_path(out), &cfg.to_toml())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn to_json_lines<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn config_json(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("configuration serializes")
}

/// Reads the world of `path` into `cfg.world` and builds it.
fn load_world(path: &Path, cfg: &mut RunConfig) -> Result<SyntheticWorld> {
    cfg.world = RunConfig::load(path)?.world;
    cfg.world.build()
}

/// Environment used by the policy-side commands.
enum Env {
    World(SyntheticWorld),
    Learned(SimEnvModel),
}

impl Env {
    fn open(source: &EnvSource, cfg: &mut RunConfig) -> Result<Self> {
        match (&source.env, &source.world) {
            (Some(p), None) => Ok(Env::Learned(SimEnvModel::load(p)?)),
            (None, Some(p)) => Ok(Env::World(load_world(p, cfg)?)),
            _ => Err(Error::Config("give exactly one of --env or --world".into())),
        }
    }

    fn scorer(&self) -> &dyn EnvScorer {
        match self {
            Env::World(w) => w,
            Env::Learned(m) => m,
        }
    }
}

fn session_start(s: &SessionRecord) -> Start {
    Start {
        user: s.user.clone(),
        pool: s.candidates(),
    }
}

/// Initial states sampled from a world on their own RNG stream.
pub fn world_starts(world: &SyntheticWorld, n: usize, pool_size: usize, seed: u64) -> Result<Vec<Start>> {
    if pool_size == 0 || pool_size > world.items.len() {
        return Err(Error::Argument(format!(
            "pool size {pool_size} must be in 1..={}",
            world.items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (u, pool) = sample_start(world, pool_size, &mut rng);
            Start {
                user: world.users[u].clone(),
                pool: pool.into_iter().map(|i| world.items[i].clone()).collect(),
            }
        })
        .collect())
}

fn gen_yahoo(a: YahooArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let y = &mut cfg.data.yahoo;
    if let Some(l) = a.lambda {
        y.bounce.lambda = l;
    }
    if let Some(t) = a.threshold {
        y.bounce.threshold = t;
    }
    if let Some(d) = a.dim {
        y.dim = d;
    }
    cfg.validate()?;
    let examples = parse_ltr(&a.input, cfg.data.yahoo.dim)?;
    let built = build_yahoo_with_fitted_scorer(&examples, &cfg.data.yahoo)?;
    save_sessions(&built.sessions, &a.out)?;
    write_sidecar(&a.out, &cfg)?;
    eprintln!(
        "wrote {} sessions to {} ({} queries skipped)",
        built.sessions.len(),
        a.out.display(),
        built.skipped.len()
    );
    Ok(())
}

fn gen_synthetic(a: SyntheticArgs) -> Result<()> {
    let mut cfg = config_or_world(a.config.as_deref(), a.world.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let syn = &mut cfg.data.synthetic;
    if let Some(n) = a.sessions {
        syn.sessions = n;
    }
    if let Some(p) = a.pool {
        syn.pool_size = p;
    }
    if let Some(d) = a.depth {
        syn.max_depth = d;
    }
    cfg.validate()?;
    let world = match &a.world {
        Some(p) => load_world(p, &mut cfg)?,
        None => cfg.world.build()?,
    };
    let sessions = generate_synthetic(&world, &cfg.generate())?;
    save_sessions(&sessions, &a.out)?;
    write_sidecar(&a.out, &cfg)?;
    eprintln!("wrote {} sessions to {}", sessions.len(), a.out.display());
    Ok(())
}

fn cmd_train_env(a: TrainEnvArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let sessions = load_sessions(&a.data)?;
    let trained = train_env(&sessions, &cfg.env_train())?;
    trained.model.save(&a.out)?;
    write_sidecar(&a.out, &cfg)?;
    if let Some(log) = &a.log {
        write_file(log, &to_json_lines(&trained.epochs))?;
    }
    let best = &trained.epochs[trained.best_epoch - 1];
    eprintln!(
        "best epoch {} of {}: held-out loss {:.6}",
        trained.best_epoch,
        trained.epochs.len(),
        best.heldout_loss
    );
    Ok(())
}

fn check_dims(policy_dims: (usize, usize), start: &Start) -> Result<()> {
    let item_dim = start.pool.first().map_or(0, |i| i.features.len());
    if policy_dims != (start.user.features.len(), item_dim) {
        return Err(Error::Config(format!(
            "policy expects user/item dims {:?}, data has ({}, {item_dim})",
            policy_dims,
            start.user.features.len()
        )));
    }
    Ok(())
}

fn cmd_train_policy(a: TrainPolicyArgs) -> Result<()> {
    let mut cfg = config_or_world(a.config.as_deref(), a.source.world.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.policy.train;
    if let Some(b) = a.baseline {
        t.baseline = b.into();
    }
    if let Some(n) = a.n_traj {
        t.n_traj = n;
    }
    if let Some(k) = a.k {
        t.k = k;
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    if let Some(i) = a.iters {
        t.max_iters = i;
    }
    t.rollout.sample_clicks |= a.sample_clicks;
    t.rollout.expected_bounce |= a.expected_bounce;
    if let Some(c) = a.carry {
        cfg.policy.shape.carry = match c {
            CarryArg::Last => CarryMode::Last,
            CarryArg::Chosen => CarryMode::Chosen,
        };
    }
    if a.constant_pbr.is_some() {
        cfg.policy.constant_pbr = a.constant_pbr;
    }
    cfg.validate()?;
    let env = Env::open(&a.source, &mut cfg)?;
    let k = cfg.policy.train.k;

    let (starts, eval_starts) = match (&a.data, &env) {
        (Some(p), _) => {
            let all: Vec<Start> = load_sessions(p)?
                .iter()
                .map(session_start)
                .filter(|s| s.pool.len() >= k)
                .collect();
            let n_eval = cfg.policy.eval_starts.min(all.len() / 2);
            let (train, eval) = all.split_at(all.len() - n_eval);
            (train.to_vec(), eval.to_vec())
        }
        (None, Env::World(w)) => {
            let pool = cfg.data.synthetic.pool_size;
            (
                world_starts(w, cfg.policy.starts, pool, cfg.stage_seed(stream::STARTS))?,
                world_starts(w, cfg.policy.eval_starts, pool, cfg.stage_seed(stream::EVAL))?,
            )
        }
        (None, Env::Learned(_)) => {
            return Err(Error::Config("--env needs --data to supply initial states".into()))
        }
    };
    let Some(first) = starts.first() else {
        return Err(Error::Argument(format!("no initial state has a pool of at least k = {k} items")));
    };
    let policy = PolicyModel::new(
        first.user.features.len(),
        first.pool[0].features.len(),
        cfg.policy.shape.clone(),
        cfg.stage_seed(stream::POLICY_INIT),
    )?;
    let trained = match cfg.policy.constant_pbr {
        Some(pbr) => train_policy(
            policy,
            &ConstantPbr {
                inner: env.scorer(),
                pbr,
            },
            &starts,
            &eval_starts,
            &cfg.policy_train(),
        )?,
        None => train_policy(policy, env.scorer(), &starts, &eval_starts, &cfg.policy_train())?,
    };
    trained.model.save(&a.out)?;
    write_sidecar(&a.out, &cfg)?;
    if let Some(log) = &a.log {
        write_file(log, &to_json_lines(&trained.curve))?;
    }
    match trained.curve.last().and_then(|c| c.eval_cte) {
        Some(c) => eprintln!("{} iterations, eval CTE {c:.6}", trained.iterations),
        None => eprintln!("{} iterations", trained.iterations),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MethodReport {
    name: String,
    cte: f64,
    #[serde(flatten)]
    metrics: EvalReport,
}

fn categories_in(sessions: &[SessionRecord]) -> usize {
    sessions
        .iter()
        .flat_map(|s| s.candidates())
        .map(|i| i.category)
        .collect::<BTreeSet<_>>()
        .len()
}

fn clicked_categories(s: &SessionRecord) -> Vec<u32> {
    s.impressions.iter().filter(|i| i.click).map(|i| i.item.category).collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = config_or_world(a.config.as_deref(), a.source.world.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.k_list {
        cfg.eval.k_list = k;
    }
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    if let Some(al) = a.alphas {
        cfg.eval.alphas = al;
    }
    cfg.eval.wgcar_literal |= a.wgcar_literal;
    cfg.validate()?;
    let env = Env::open(&a.source, &mut cfg)?;
    let policy = PolicyModel::load(&a.policy)?;
    let ev = cfg.eval.clone();
    let depth = ev.k_list.iter().copied().chain([ev.k]).max().unwrap_or(ev.k);

    let all = load_sessions(&a.data)?;
    let sessions: Vec<&SessionRecord> = all.iter().filter(|s| s.candidates().len() >= depth).collect();
    if sessions.is_empty() {
        return Err(Error::Argument(format!("no session has at least {depth} candidates")));
    }
    let starts: Vec<Start> = sessions.iter().map(|s| session_start(s)).collect();
    check_dims((policy.user_dim, policy.item_dim), &starts[0])?;
    let n_categories = if ev.n_categories > 0 {
        ev.n_categories
    } else {
        categories_in(&all)
    };

    let scorer = env.scorer();
    let mut methods: Vec<(String, Box<dyn Fn(&Start) -> Result<Vec<usize>> + '_>)> = vec![(
        "policy".into(),
        Box::new(|s: &Start| policy_ranking(&policy, s, depth)),
    )];
    methods.push((
        "greedy_ctr".into(),
        Box::new(|s: &Start| greedy_ctr_rank(scorer, &s.user, &s.pool_refs(), depth)),
    ));
    for &alpha in &ev.alphas {
        let literal = ev.wgcar_literal;
        methods.push((
            format!("wgcar_{alpha}"),
            Box::new(move |s: &Start| weighted_greedy_rank(scorer, &s.user, &s.pool_refs(), depth, alpha, literal)),
        ));
    }

    let eval_seed = cfg.stage_seed(stream::EVAL);
    let mut reports = Vec::new();
    for (name, rank) in &methods {
        let mut cte_sum = 0.0;
        let mut lists = Vec::with_capacity(starts.len());
        let mut simulated = Vec::new();
        for (i, (start, logged)) in starts.iter().zip(&sessions).enumerate() {
            let order = rank(start)?;
            let ranked: Vec<&Item> = order.iter().map(|&j| &start.pool[j]).collect();
            cte_sum += list_cte(scorer, &start.user, &ranked[..ev.k])?;
            for r in 0..ev.rollouts {
                let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
                rng.set_stream((i * ev.rollouts + r) as u64);
                simulated.push(simulate_session(
                    scorer,
                    logged.session_id.clone(),
                    &start.user,
                    &ranked[..ev.k],
                    None,
                    &mut rng,
                )?);
            }
            lists.push(RankedList {
                session_id: logged.session_id.clone(),
                ranked: ranked.iter().map(|i| i.category).collect(),
                clicked_before: clicked_categories(logged),
            });
        }
        reports.push(MethodReport {
            name: name.clone(),
            cte: cte_sum / starts.len() as f64,
            metrics: evaluate_metrics(&simulated, &lists, &ev.k_list, n_categories, ev.kl_smoothing)?,
        });
    }
    let report = json!({
        "config": config_json(&cfg),
        "sessions": sessions.len(),
        "skipped_sessions": all.len() - sessions.len(),
        "n_categories": n_categories,
        "methods": reports,
    });
    write_file(&a.out, &to_json(&report))?;
    for r in &reports {
        eprintln!("{:<12} cte {:.6}  ac {:.4}  ad {:.4}", r.name, r.cte, r.metrics.ac, r.metrics.ad);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankedItems {
    items: Vec<String>,
    cte: f64,
}

#[derive(Debug, Serialize)]
struct WgcarResult {
    alpha: f64,
    items: Vec<String>,
    cte: f64,
}

#[derive(Debug, Serialize)]
struct OracleInstance {
    user: String,
    pool: Vec<String>,
    optimal: RankedItems,
    greedy_ctr: RankedItems,
    wgcar: Vec<WgcarResult>,
    /// `(optimal - greedy) / greedy`.
    greedy_gap: f64,
    best_wgcar_gap: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    instances: usize,
    mean_optimal_cte: f64,
    mean_greedy_ctr_cte: f64,
    mean_best_wgcar_cte: Option<f64>,
    greedy_gap: f64,
    best_wgcar_gap: Option<f64>,
}

fn relative_gap(best: f64, other: f64) -> f64 {
    if other == 0.0 {
        if best == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (best - other) / other
    }
}

fn ids(pool: &[Item], order: &[usize]) -> Vec<String> {
    order.iter().map(|&i| pool[i].id.clone()).collect()
}

/// Oracle, greedy and WGCAR rankings of one (user, pool) instance.
fn oracle_instance<E: EnvScorer + ?Sized>(
    env: &E,
    user: &User,
    pool: &[Item],
    depth: usize,
    alphas: &[f64],
    literal: bool,
) -> Result<OracleInstance> {
    let refs: Vec<&Item> = pool.iter().collect();
    let cte_of = |order: &[usize]| {
        let l: Vec<&Item> = order.iter().map(|&i| refs[i]).collect();
        list_cte(env, user, &l)
    };
    let opt = optimal_ranking(env, user, pool, depth)?;
    let greedy = greedy_ctr_rank(env, user, &refs, depth)?;
    let greedy_cte = cte_of(&greedy)?;
    let wgcar = alphas
        .iter()
        .map(|&alpha| {
            let order = weighted_greedy_rank(env, user, &refs, depth, alpha, literal)?;
            Ok(WgcarResult {
                alpha,
                items: ids(pool, &order),
                cte: cte_of(&order)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_wgcar = wgcar.iter().map(|w| w.cte).reduce(f64::max);
    Ok(OracleInstance {
        user: user.id.clone(),
        pool: pool.iter().map(|i| i.id.clone()).collect(),
        greedy_gap: relative_gap(opt.cte, greedy_cte),
        best_wgcar_gap: best_wgcar.map(|w| relative_gap(opt.cte, w)),
        optimal: RankedItems {
            items: ids(pool, &opt.order),
            cte: opt.cte,
        },
        greedy_ctr: RankedItems {
            items: ids(pool, &greedy),
            cte: greedy_cte,
        },
        wgcar,
    })
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let mut cfg = config_or_world(a.config.as_deref(), a.source.world.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.pool_size {
        cfg.oracle.pool_size = p;
    }
    if let Some(d) = a.depth {
        cfg.oracle.depth = d;
    }
    if let Some(n) = a.instances {
        cfg.oracle.instances = n;
    }
    cfg.eval.wgcar_literal |= a.wgcar_literal;
    cfg.validate()?;
    let o = cfg.oracle.clone();
    if o.instances == 0 || o.depth == 0 || o.depth > o.pool_size {
        return Err(Error::Config(format!(
            "oracle needs instances >= 1 and depth {} in 1..=pool_size {}",
            o.depth, o.pool_size
        )));
    }
    let env = Env::open(&a.source, &mut cfg)?;
    let starts: Vec<Start> = match (&env, &a.data) {
        (_, Some(p)) => load_sessions(p)?
            .iter()
            .map(session_start)
            .filter(|s| s.pool.len() >= o.pool_size)
            .take(o.instances)
            .map(|mut s| {
                s.pool.truncate(o.pool_size);
                s
            })
            .collect(),
        (Env::World(w), None) => world_starts(w, o.instances, o.pool_size, cfg.stage_seed(stream::ORACLE))?,
        (Env::Learned(_), None) => {
            return Err(Error::Config("--env needs --data to supply candidate pools".into()))
        }
    };
    if starts.is_empty() {
        return Err(Error::Argument(format!("no session has {} candidates", o.pool_size)));
    }
    let instances = starts
        .iter()
        .map(|s| oracle_instance(env.scorer(), &s.user, &s.pool, o.depth, &cfg.eval.alphas, cfg.eval.wgcar_literal))
        .collect::<Result<Vec<_>>>()?;
    let n = instances.len() as f64;
    let mean = |f: &dyn Fn(&OracleInstance) -> f64| instances.iter().map(f).sum::<f64>() / n;
    let mean_opt = mean(&|i| i.optimal.cte);
    let mean_greedy = mean(&|i| i.greedy_ctr.cte);
    let mean_wgcar = (!cfg.eval.alphas.is_empty())
        .then(|| mean(&|i| i.wgcar.iter().map(|w| w.cte).fold(f64::NEG_INFINITY, f64::max)));
    let summary = OracleSummary {
        instances: instances.len(),
        mean_optimal_cte: mean_opt,
        mean_greedy_ctr_cte: mean_greedy,
        mean_best_wgcar_cte: mean_wgcar,
        greedy_gap: relative_gap(mean_opt, mean_greedy),
        best_wgcar_gap: mean_wgcar.map(|w| relative_gap(mean_opt, w)),
    };
    eprintln!(
        "optimal CTE {:.6}, greedy-CTR CTE {:.6} ({:+.2}%)",
        mean_opt,
        mean_greedy,
        100.0 * summary.greedy_gap
    );
    let report = json!({
        "config": config_json(&cfg),
        "summary": summary,
        "instances": instances,
    });
    write_file(&a.report, &to_json(&report))
}

#[derive(Debug, Serialize)]
struct RankLine {
    session_id: String,
    items: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cte: Option<f64>,
}

fn cmd_rank(a: RankArgs) -> Result<()> {
    let policy = PolicyModel::load(&a.policy)?;
    let env = a.env.as_ref().map(SimEnvModel::load).transpose()?;
    let sessions = load_sessions(&a.data)?;
    let mut lines = Vec::with_capacity(sessions.len());
    let mut elapsed = Duration::ZERO;
    for s in &sessions {
        let start = session_start(s);
        check_dims((policy.user_dim, policy.item_dim), &start)?;
        let pool = start.pool_refs();
        let d = match a.mode {
            DecodeMode::Incremental => decode_incremental(&policy, &s.user, &pool, a.k)?,
            DecodeMode::Naive => decode_naive(&policy, &s.user, &pool, a.k)?,
        };
        elapsed += d.elapsed;
        let ranked: Vec<&Item> = d.order.iter().map(|&i| pool[i]).collect();
        let cte = env.as_ref().map(|e| list_cte(e, &s.user, &ranked)).transpose()?;
        lines.push(RankLine {
            session_id: s.session_id.clone(),
            items: ranked.iter().map(|i| i.id.clone()).collect(),
            cte,
        });
    }
    let text = to_json_lines(&lines);
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    eprintln!("ranked {} sessions in {:.3} ms", sessions.len(), elapsed.as_secs_f64() * 1e3);
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    k: usize,
    incremental_ms: f64,
    naive_ms: f64,
    ratio: f64,
    identical: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let b = &mut cfg.bench;
    if let Some(n) = a.n {
        b.n = n;
    }
    if let Some(k) = a.k_list {
        b.k_list = k;
    }
    if let Some(r) = a.repeats {
        b.repeats = r;
    }
    cfg.validate()?;
    let b = cfg.bench.clone();
    if b.repeats == 0 || b.k_list.iter().any(|&k| k == 0 || k > b.n) {
        return Err(Error::Config(format!("bench needs repeats >= 1 and every k in 1..={}", b.n)));
    }
    let seed = cfg.stage_seed(stream::BENCH);
    let policy = PolicyModel::new(b.user_dim, b.item_dim, cfg.policy.shape.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user = User {
        id: "bench".into(),
        features: random_vec(&mut rng, b.user_dim),
    };
    let pool: Vec<Item> = (0..b.n)
        .map(|i| Item {
            id: format!("i{i}"),
            features: random_vec(&mut rng, b.item_dim),
            category: 0,
        })
        .collect();
    let refs: Vec<&Item> = pool.iter().collect();
    let mut rows = Vec::new();
    for &k in &b.k_list {
        let mut inc = Vec::new();
        let mut naive = Vec::new();
        let mut identical = true;
        for _ in 0..b.repeats {
            let di = decode_incremental(&policy, &user, &refs, k)?;
            let dn = decode_naive(&policy, &user, &refs, k)?;
            identical &= di.order == dn.order;
            inc.push(di.elapsed.as_secs_f64() * 1e3);
            naive.push(dn.elapsed.as_secs_f64() * 1e3);
        }
        let (i, n) = (median(inc), median(naive));
        eprintln!("k={k:>3}  incremental {i:.3} ms  naive {n:.3} ms  ratio {:.2}", n / i);
        rows.push(BenchRow {
            k,
            incremental_ms: i,
            naive_ms: n,
            ratio: n / i,
            identical,
        });
    }
    let report = json!({
        "config": config_json(&cfg),
        "n": b.n,
        "repeats": b.repeats,
        "results": rows,
    });
    write_file(&a.report, &to_json(&report))?;
    if rows.iter().any(|r| !r.identical) {
        return Err(Error::Contract("incremental and naive decoding disagree".into()));
    }
    Ok(())
}
