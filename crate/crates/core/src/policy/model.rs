use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Item, User};
use crate::error::{Error, Result};
use crate::nn::{masked_softmax, Checkpoint, Fusion, Graph, GruParams, Linear, ParamStore, Tensor, Var};

const MODEL_KIND: &str = "policy";

/// Which hidden vector seeds the next step's sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarryMode {
    /// Hidden state after the last pool position of the previous sweep.
    #[default]
    Last,
    /// Hidden state at the position of the previously chosen item.
    Chosen,
}

impl std::str::FromStr for CarryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "chosen" => Ok(Self::Chosen),
            _ => Err(Error::Config(format!("carry must be last or chosen, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyShape {
    pub d_model: usize,
    /// Hidden widths of the fusion MLP; a final layer of width `d_model` is
    /// appended.
    pub fusion_hidden: Vec<usize>,
    pub carry: CarryMode,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            fusion_hidden: vec![64, 32],
            carry: CarryMode::Last,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    user_dim: usize,
    item_dim: usize,
    shape: PolicyShape,
}

/// Fusion layer, GRU over the pool, and a bias-free scoring vector.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub params: ParamStore,
    pub shape: PolicyShape,
    pub user_dim: usize,
    pub item_dim: usize,
    fusion: Fusion,
    gru: GruParams,
    ws: Linear,
}

/// Fused pool representations of one session, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCache {
    pub rows: Tensor,
}

impl FusionCache {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoding state of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    /// `true` for items already placed.
    pub mask: Vec<bool>,
    /// Hidden vector that seeds the next sweep.
    pub carry: Vec<f64>,
    pub bounced: bool,
    /// 1-based index of the next position to fill.
    pub step: usize,
}

impl PolicyState {
    pub fn initial(n: usize, d_model: usize) -> Self {
        Self {
            mask: vec![false; n],
            carry: vec![0.0; d_model],
            bounced: false,
            step: 1,
        }
    }

    pub fn placed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One full GRU pass over the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// Hidden vector after each pool position.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// How [`PolicyModel::step`] picks the action.
pub enum Pick<'r> {
    Sample(&'r mut ChaCha8Rng),
    Argmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub action: usize,
    pub log_prob: f64,
    pub next: PolicyState,
}

/// Highest unmasked entry; ties go to the lowest index.
pub fn argmax_unmasked(values: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if !m && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::EmptyActionSet)
}

/// Inverse-CDF draw from `probs`; masked (zero) entries are never returned.
pub fn sample_index(probs: &[f64], mask: &[bool], rng: &mut impl Rng) -> Result<usize> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m || p == 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return Ok(i);
        }
    }
    last.ok_or(Error::EmptyActionSet)
}

impl PolicyModel {
    pub fn new(user_dim: usize, item_dim: usize, shape: PolicyShape, seed: u64) -> Result<Self> {
        if user_dim == 0 || item_dim == 0 || shape.d_model == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut widths = shape.fusion_hidden.clone();
        widths.push(shape.d_model);
        Fusion::new(&mut ps, "policy.fusion", user_dim, item_dim, &widths, &mut rng);
        GruParams::new(&mut ps, "policy.gru", shape.d_model, shape.d_model, &mut rng);
        Linear::new(&mut ps, "policy.ws", shape.d_model, 1, false, &mut rng);
        Self::bind(ps, shape, user_dim, item_dim)
    }

    fn bind(params: ParamStore, shape: PolicyShape, user_dim: usize, item_dim: usize) -> Result<Self> {
        let fusion = Fusion::bind(&params, "policy.fusion", user_dim, item_dim, shape.fusion_hidden.len() + 1)?;
        let gru = GruParams::bind(&params, "policy.gru")?;
        let ws = Linear::bind(&params, "policy.ws", false)?;
        if gru.hidden != shape.d_model || ws.fan_out != 1 {
            return Err(Error::Checkpoint("policy parameter shapes disagree with metadata".into()));
        }
        Ok(Self {
            params,
            shape,
            user_dim,
            item_dim,
            fusion,
            gru,
            ws,
        })
    }

    /// Same architecture with new parameter values (e.g. after an update).
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        Self::bind(params, self.shape.clone(), self.user_dim, self.item_dim)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ModelMeta {
            kind: MODEL_KIND.into(),
            user_dim: self.user_dim,
            item_dim: self.item_dim,
            shape: self.shape.clone(),
        };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Checkpoint(format!("bad policy metadata: {e}")))?;
        if meta.kind != MODEL_KIND {
            return Err(Error::Checkpoint(format!("expected a {MODEL_KIND} checkpoint, found {}", meta.kind)));
        }
        Self::bind(ck.params, meta.shape, meta.user_dim, meta.item_dim)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn d_model(&self) -> usize {
        self.shape.d_model
    }

    pub(crate) fn fuse_on(&self, g: &mut Graph, user: &User, pool: &[&Item]) -> Result<Var> {
        if pool.is_empty() {
            return Err(Error::Argument("cannot fuse an empty pool".into()));
        }
        let rows: Vec<&[f64]> = pool.iter().map(|i| i.features.as_slice()).collect();
        self.fusion.forward(g, &user.features, &rows)
    }

    /// Fused representation of every pool item, computed once per session.
    pub fn fuse_pool(&self, user: &User, pool: &[&Item]) -> Result<FusionCache> {
        let mut g = Graph::new(&self.params);
        let e = self.fuse_on(&mut g, user, pool)?;
        Ok(FusionCache {
            rows: g.value(e).clone(),
        })
    }

    /// Records one sweep on `g`: the GRU reads `rows` in pool order starting
    /// from `h0`. Returns the per-position hidden nodes and the `N x 1` logits.
    pub(crate) fn sweep_on(&self, g: &mut Graph, rows: &[Var], h0: Var) -> Result<(Vec<Var>, Var)> {
        let mut h = h0;
        let mut hidden = Vec::with_capacity(rows.len());
        for &x in rows {
            h = self.gru.step(g, x, h)?;
            hidden.push(h);
        }
        let stacked = g.concat_rows(&hidden)?;
        let logits = self.ws.forward(g, stacked)?;
        Ok((hidden, logits))
    }

    /// One sweep from `h0` over cached fusion rows.
    pub fn sweep(&self, cache: &FusionCache, h0: &[f64]) -> Result<Sweep> {
        if h0.len() != self.d_model() {
            return Err(Error::dim(
                "policy sweep",
                format!("carried hidden has {} values, expected {}", h0.len(), self.d_model()),
            ));
        }
        let mut g = Graph::new(&self.params);
        let rows: Vec<Var> = (0..cache.len())
            .map(|i| g.input(Tensor::vector(cache.rows.row(i).to_vec())))
            .collect();
        let h = g.input(Tensor::vector(h0.to_vec()));
        let (hidden, logits) = self.sweep_on(&mut g, &rows, h)?;
        Ok(Sweep {
            hidden: hidden.iter().map(|&v| g.value(v).data().to_vec()).collect(),
            logits: g.value(logits).data().to_vec(),
        })
    }

    fn check_state(&self, cache: &FusionCache, state: &PolicyState) -> Result<()> {
        if state.bounced {
            return Err(Error::Contract("the user has bounced; no further action is allowed".into()));
        }
        if state.mask.len() != cache.len() {
            return Err(Error::dim(
                "policy state",
                format!("mask covers {} items, cache has {}", state.mask.len(), cache.len()),
            ));
        }
        Ok(())
    }

    /// Probability of each pool item being placed next.
    pub fn action_distribution(&self, cache: &FusionCache, state: &PolicyState) -> Result<Vec<f64>> {
        self.check_state(cache, state)?;
        let sw = self.sweep(cache, &state.carry)?;
        masked_softmax(&sw.logits, &state.mask)
    }

    /// Hidden vector to carry forward after choosing `action` in `sweep`.
    pub fn next_carry(&self, sweep: &Sweep, action: usize) -> Vec<f64> {
        match self.shape.carry {
            CarryMode::Last => sweep.hidden.last().expect("non-empty pool").clone(),
            CarryMode::Chosen => sweep.hidden[action].clone(),
        }
    }

    /// Picks the next item and advances the state; the caller sets the
    /// bounce flag after consulting the environment.
    pub fn step(&self, cache: &FusionCache, state: &PolicyState, pick: Pick<'_>) -> Result<StepOutcome> {
        self.check_state(cache, state)?;
        let sw = self.sweep(cache, &state.carry)?;
        let probs = masked_softmax(&sw.logits, &state.mask)?;
        let action = match pick {
            Pick::Sample(rng) => sample_index(&probs, &state.mask, rng)?,
            Pick::Argmax => argmax_unmasked(&sw.logits, &state.mask)?,
        };
        let mut next = state.clone();
        next.mask[action] = true;
        next.carry = self.next_carry(&sw, action);
        next.step += 1;
        Ok(StepOutcome {
            action,
            log_prob: probs[action].ln(),
            next,
        })
    }
}

/// A differentiable record of one decoding session, used for training.
pub struct PolicyTape<'m> {
    model: &'m PolicyModel,
    pub graph: Graph<'m>,
    rows: Vec<Var>,
    carry: Var,
    pending: Option<(Vec<Var>, Var)>,
    /// `log pi(a_t | s_t)` nodes of the committed steps.
    pub log_probs: Vec<Var>,
}

impl<'m> PolicyTape<'m> {
    pub fn new(model: &'m PolicyModel, user: &User, pool: &[&Item]) -> Result<Self> {
        let mut graph = Graph::new(&model.params);
        let e = model.fuse_on(&mut graph, user, pool)?;
        let rows = (0..pool.len())
            .map(|i| graph.slice_rows(e, i, 1))
            .collect::<Result<Vec<_>>>()?;
        let carry = graph.input(Tensor::vector(vec![0.0; model.d_model()]));
        Ok(Self {
            model,
            graph,
            rows,
            carry,
            pending: None,
            log_probs: Vec::new(),
        })
    }

    /// Runs the sweep for the next position and returns its distribution.
    pub fn distribution(&mut self, mask: &[bool]) -> Result<Vec<f64>> {
        let (hidden, logits) = self.model.sweep_on(&mut self.graph, &self.rows, self.carry)?;
        let probs = masked_softmax(self.graph.value(logits).data(), mask)?;
        self.pending = Some((hidden, logits));
        Ok(probs)
    }

    /// Commits `action` for the pending sweep; returns its log-probability.
    pub fn commit(&mut self, mask: &[bool], action: usize) -> Result<f64> {
        let (hidden, logits) = self
            .pending
            .take()
            .ok_or_else(|| Error::Contract("commit without a pending distribution".into()))?;
        let lp = self.graph.masked_log_softmax_at(logits, mask, action)?;
        self.log_probs.push(lp);
        self.carry = match self.model.shape.carry {
            CarryMode::Last => *hidden.last().expect("non-empty pool"),
            CarryMode::Chosen => hidden[action],
        };
        Ok(self.graph.scalar(lp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::item;

    pub(crate) fn pool(n: usize) -> Vec<Item> {
        (0..n)
            .map(|i| {
                let x = i as f64;
                item(&format!("p{i}"), i as u32 % 3, vec![(0.7 * x).sin(), (1.3 * x).cos(), 0.1 * x])
            })
            .collect()
    }

    fn user() -> User {
        User {
            id: "u".into(),
            features: vec![1.0, -0.4],
        }
    }

    fn small(carry: CarryMode) -> PolicyModel {
        let shape = PolicyShape {
            d_model: 5,
            fusion_hidden: vec![7, 6],
            carry,
        };
        PolicyModel::new(2, 3, shape, 11).unwrap()
    }

    fn zero_all(m: &mut PolicyModel, prefix: &str) {
        let names: Vec<String> = m.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(n, _)| n.to_string()).collect();
        for n in names {
            let id = m.params.id(&n).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_gru_and_scorer_is_uniform() {
        let mut m = small(CarryMode::Last);
        zero_all(&mut m, "policy.gru");
        zero_all(&mut m, "policy.ws");
        let p = pool(4);
        let refs: Vec<&Item> = p.iter().collect();
        let cache = m.fuse_pool(&user(), &refs).unwrap();
        let mut st = PolicyState::initial(4, 5);
        st.mask[2] = true;
        let d = m.action_distribution(&cache, &st).unwrap();
        assert_eq!(d, vec![1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn single_survivor_gets_all_mass() {
        let m = small(CarryMode::Last);
        let p = pool(3);
        let refs: Vec<&Item> = p.iter().collect();
        let cache = m.fuse_pool(&user(), &refs).unwrap();
        let mut st = PolicyState::initial(3, 5);
        st.mask = vec![true, false, true];
        assert_eq!(m.action_distribution(&cache, &st).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn cache_rows_match_direct_fusion() {
        let m = small(CarryMode::Last);
        let mut p = pool(3);
        p.push(p[1].clone());
        p[3].id = "dup".into();
        let refs: Vec<&Item> = p.iter().collect();
        let cache = m.fuse_pool(&user(), &refs).unwrap();
        assert_eq!(cache.rows.row(1), cache.rows.row(3));
        for (i, it) in p.iter().enumerate() {
            let single = m.fuse_pool(&user(), &[it]).unwrap();
            assert_eq!(single.rows.row(0), cache.rows.row(i));
        }
    }

    #[test]
    fn carryover_changes_the_distribution() {
        for carry in [CarryMode::Last, CarryMode::Chosen] {
            let m = small(carry);
            let p = pool(5);
            let refs: Vec<&Item> = p.iter().collect();
            let cache = m.fuse_pool(&user(), &refs).unwrap();
            let s1 = PolicyState::initial(5, 5);
            let d1 = m.action_distribution(&cache, &s1).unwrap();
            let out = m.step(&cache, &s1, Pick::Argmax).unwrap();
            let mut unmasked_next = out.next.clone();
            unmasked_next.mask = vec![false; 5];
            let d2 = m.action_distribution(&cache, &unmasked_next).unwrap();
            assert_ne!(d1, d2);
        }
    }

    #[test]
    fn step_contracts() {
        let m = small(CarryMode::Last);
        let p = pool(4);
        let refs: Vec<&Item> = p.iter().collect();
        let cache = m.fuse_pool(&user(), &refs).unwrap();
        let st = PolicyState::initial(4, 5);
        let a = m.step(&cache, &st, Pick::Argmax).unwrap();
        let b = m.step(&cache, &st, Pick::Argmax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.next.placed(), 1);
        assert_eq!(a.next.step, 2);

        let dist = m.action_distribution(&cache, &st).unwrap();
        assert!((a.log_prob - dist[a.action].ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = st.clone();
        s.mask = vec![true, false, true, false];
        for _ in 0..200 {
            let o = m.step(&cache, &s, Pick::Sample(&mut rng)).unwrap();
            assert!(o.action == 1 || o.action == 3);
        }

        let mut terminal = st.clone();
        terminal.bounced = true;
        assert!(matches!(m.step(&cache, &terminal, Pick::Argmax), Err(Error::Contract(_))));
        let mut full = st;
        full.mask = vec![true; 4];
        assert!(matches!(m.action_distribution(&cache, &full), Err(Error::EmptyActionSet)));
    }

    #[test]
    fn tape_matches_inference_path() {
        for carry in [CarryMode::Last, CarryMode::Chosen] {
            let m = small(carry);
            let p = pool(5);
            let refs: Vec<&Item> = p.iter().collect();
            let cache = m.fuse_pool(&user(), &refs).unwrap();
            let mut tape = PolicyTape::new(&m, &user(), &refs).unwrap();
            let mut st = PolicyState::initial(5, 5);
            for _ in 0..3 {
                let inf = m.action_distribution(&cache, &st).unwrap();
                let tp = tape.distribution(&st.mask).unwrap();
                assert_eq!(inf, tp);
                let out = m.step(&cache, &st, Pick::Argmax).unwrap();
                let lp = tape.commit(&st.mask, out.action).unwrap();
                assert!((lp - out.log_prob).abs() < 1e-12);
                st = out.next;
            }
        }
    }

    #[test]
    fn relabeling_ids_does_not_change_distribution() {
        let m = small(CarryMode::Last);
        let p = pool(4);
        let mut q = p.clone();
        for (i, it) in q.iter_mut().enumerate() {
            it.id = format!("other{}", 9 - i);
        }
        let a: Vec<&Item> = p.iter().collect();
        let b: Vec<&Item> = q.iter().collect();
        let st = PolicyState::initial(4, 5);
        let da = m.action_distribution(&m.fuse_pool(&user(), &a).unwrap(), &st).unwrap();
        let db = m.action_distribution(&m.fuse_pool(&user(), &b).unwrap(), &st).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small(CarryMode::Chosen);
        let back = PolicyModel::from_checkpoint(Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params.flatten(), m.params.flatten());
        assert_eq!(back.shape, m.shape);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax_unmasked(&[1.0, 3.0, 3.0], &[false; 3]).unwrap(), 1);
        assert_eq!(argmax_unmasked(&[1.0, 3.0, 3.0], &[false, true, false]).unwrap(), 2);
    }
}
