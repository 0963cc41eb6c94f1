//! The learned simulation environment: conditional CTR and PBR of each
//! impression given the user and the browsing history up to and including it.
//!
//! Architecture: fused user x item representations, one causal transformer
//! block with learned positions, and a small head MLP ending in two logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Item, SessionRecord, User};
use crate::env::{EnvEstimate, EnvScorer};
use crate::error::{Error, Result};
use crate::nn::graph::LOGIT_CLAMP;
use crate::nn::{Checkpoint, Fusion, Grads, Graph, Linear, Mlp, ParamStore, TransformerBlock, TransformerShape, Var};

const MODEL_KIND: &str = "sim-env";

/// Shape of the environment network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimEnvShape {
    pub d_model: usize,
    /// Hidden widths of the fusion MLP; a final layer of width `d_model` is
    /// appended.
    pub fusion_hidden: Vec<usize>,
    /// Hidden widths of the prediction head before the two output logits.
    pub head_hidden: Vec<usize>,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for SimEnvShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            fusion_hidden: vec![64, 32],
            head_hidden: vec![32],
            d_ff: 64,
            max_len: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    user_dim: usize,
    item_dim: usize,
    shape: SimEnvShape,
}

/// Conditional CTR/PBR estimator.
#[derive(Debug, Clone)]
pub struct SimEnvModel {
    pub params: ParamStore,
    pub shape: SimEnvShape,
    pub user_dim: usize,
    pub item_dim: usize,
    fusion: Fusion,
    encoder: TransformerBlock,
    head: Mlp,
    out: Linear,
}

/// Forward pass over one session prefix, kept on the graph for training.
pub struct EnvForward {
    /// `t x 2` logits; column 0 is CTR, column 1 is PBR.
    pub logits: Var,
    pub attention: Var,
}

impl SimEnvModel {
    pub fn new(user_dim: usize, item_dim: usize, shape: SimEnvShape, seed: u64) -> Result<Self> {
        if user_dim == 0 || item_dim == 0 {
            return Err(Error::Argument("feature dimensions must be positive".into()));
        }
        if shape.d_model == 0 || shape.max_len == 0 || shape.d_ff == 0 {
            return Err(Error::Config("d_model, d_ff and max_len must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut widths = shape.fusion_hidden.clone();
        widths.push(shape.d_model);
        Fusion::new(&mut ps, "env.fusion", user_dim, item_dim, &widths, &mut rng);
        let tshape = Self::transformer_shape(&shape);
        TransformerBlock::new(&mut ps, "env.encoder", tshape, &mut rng);
        Mlp::new(&mut ps, "env.head", shape.d_model, &shape.head_hidden, &mut rng);
        let head_out = shape.head_hidden.last().copied().unwrap_or(shape.d_model);
        Linear::new(&mut ps, "env.out", head_out, 2, true, &mut rng);
        Self::bind(ps, shape, user_dim, item_dim)
    }

    fn transformer_shape(shape: &SimEnvShape) -> TransformerShape {
        TransformerShape {
            d_model: shape.d_model,
            d_ff: shape.d_ff,
            max_len: shape.max_len,
            causal: true,
        }
    }

    fn bind(params: ParamStore, shape: SimEnvShape, user_dim: usize, item_dim: usize) -> Result<Self> {
        let fusion = Fusion::bind(&params, "env.fusion", user_dim, item_dim, shape.fusion_hidden.len() + 1)?;
        let encoder = TransformerBlock::bind(&params, "env.encoder", Self::transformer_shape(&shape))?;
        let head = Mlp::bind(&params, "env.head", shape.head_hidden.len())?;
        let out = Linear::bind(&params, "env.out", true)?;
        Ok(Self {
            params,
            shape,
            user_dim,
            item_dim,
            fusion,
            encoder,
            head,
            out,
        })
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
            .map_err(|e| Error::Checkpoint(format!("bad sim-env metadata: {e}")))?;
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

    /// Records the network on `g` for every prefix of `history` at once;
    /// causal attention makes row `t` depend only on items `..=t`.
    pub fn forward(&self, g: &mut Graph, user: &User, history: &[&Item]) -> Result<EnvForward> {
        if history.is_empty() {
            return Err(Error::Argument("environment needs a non-empty history".into()));
        }
        if history.len() > self.shape.max_len {
            return Err(Error::Capacity(format!(
                "history of {} exceeds the positional capacity {}",
                history.len(),
                self.shape.max_len
            )));
        }
        let rows: Vec<&[f64]> = history.iter().map(|i| i.features.as_slice()).collect();
        let e = self.fusion.forward(g, &user.features, &rows)?;
        let enc = self.encoder.forward(g, e)?;
        let h = self.head.forward(g, enc.hidden)?;
        let logits = self.out.forward(g, h)?;
        Ok(EnvForward {
            logits,
            attention: enc.attention,
        })
    }

    /// Summed two-head cross-entropy of one session, recorded on `g`.
    pub fn session_loss(&self, g: &mut Graph, session: &SessionRecord) -> Result<Var> {
        let hist: Vec<&Item> = session.impressions.iter().map(|i| &i.item).collect();
        let f = self.forward(g, &session.user, &hist)?;
        let mut labels = Vec::with_capacity(2 * hist.len());
        for imp in &session.impressions {
            labels.push(if imp.click { 1.0 } else { 0.0 });
            labels.push(if imp.bounce { 1.0 } else { 0.0 });
        }
        g.bce_with_logits(f.logits, &labels)
    }

    /// Loss and parameter gradient of one session.
    pub fn session_grad(&self, session: &SessionRecord) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&self.params);
        let loss = self.session_loss(&mut g, session)?;
        let value = g.scalar(loss);
        Ok((value, g.backward(&[(loss, 1.0)]).into_params()))
    }
}

/// Sigmoid with the logit clamped so the result stays strictly inside (0, 1).
fn logistic(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

impl EnvScorer for SimEnvModel {
    fn estimate(&self, user: &User, history: &[&Item]) -> Result<EnvEstimate> {
        let est = self.estimates(user, history)?;
        Ok(*est.last().expect("non-empty history"))
    }

    fn estimates(&self, user: &User, list: &[&Item]) -> Result<Vec<EnvEstimate>> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, user, list)?;
        let v = g.value(f.logits);
        Ok((0..list.len())
            .map(|t| EnvEstimate {
                ctr: logistic(v.at(t, 0)),
                pbr: logistic(v.at(t, 1)),
            })
            .collect())
    }

    fn max_len(&self) -> Option<usize> {
        Some(self.shape.max_len)
    }
}

/// Mean environment loss per session over a batch (the training objective).
pub fn env_loss(model: &SimEnvModel, batch: &[SessionRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("environment loss of an empty batch".into()));
    }
    let total = batch
        .iter()
        .map(|s| {
            let mut g = Graph::new(&model.params);
            let l = model.session_loss(&mut g, s)?;
            Ok(g.scalar(l))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(total / batch.len() as f64)
}

/// Mean per-position log-loss (click plus bounce head), comparable with
/// [`crate::dataset::SyntheticWorld::log_loss`].
pub fn position_log_loss(model: &SimEnvModel, sessions: &[SessionRecord]) -> Result<f64> {
    let parts = sessions
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(&model.params);
            let l = model.session_loss(&mut g, s)?;
            Ok((g.scalar(l), s.depth()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = parts.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(Error::Argument("log-loss of an empty session list".into()));
    }
    Ok(parts.iter().map(|p| p.0).sum::<f64>() / n as f64)
}

/// Training hyperparameters for the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvTrainConfig {
    pub shape: SimEnvShape,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Fraction of sessions held out for early stopping.
    pub holdout: f64,
    /// Derived from the run seed rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnvTrainConfig {
    fn default() -> Self {
        Self {
            shape: SimEnvShape::default(),
            lr: 1e-2,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl EnvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("environment lr {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout {} outside [0, 1)", self.holdout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EnvTraining {
    pub model: SimEnvModel,
    pub epochs: Vec<EnvEpoch>,
    pub best_epoch: usize,
}

/// Sums per-session gradients in parallel; chunking is fixed so the float
/// summation order does not depend on the thread count.
fn batch_grad(model: &SimEnvModel, batch: &[&SessionRecord]) -> Result<(f64, Grads)> {
    const CHUNK: usize = 8;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = model.params.zero_grads();
            let mut loss = 0.0;
            for s in chunk {
                let (l, g) = model.session_grad(s)?;
                loss += l;
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params.zero_grads();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Mini-batch Adagrad on the two-head cross-entropy, with early stopping on
/// a held-out split. Returns the parameters of the best held-out epoch.
pub fn train_env(sessions: &[SessionRecord], cfg: &EnvTrainConfig) -> Result<EnvTraining> {
    cfg.validate()?;
    let Some(first) = sessions.first() else {
        return Err(Error::Argument("cannot train the environment on an empty dataset".into()));
    };
    let Some(first_item) = first.impressions.first() else {
        return Err(Error::Argument("first session has no impressions".into()));
    };
    let max_depth = sessions.iter().map(|s| s.depth()).max().unwrap_or(0);
    if max_depth > cfg.shape.max_len {
        return Err(Error::Config(format!(
            "sessions reach depth {max_depth} but max_len is {}",
            cfg.shape.max_len
        )));
    }
    let mut model = SimEnvModel::new(
        first.user.features.len(),
        first_item.item.features.len(),
        cfg.shape.clone(),
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4a1);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if sessions.len() > 1 {
        ((sessions.len() as f64 * cfg.holdout).round() as usize).min(sessions.len() - 1)
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let heldout: Vec<SessionRecord> = hold_idx.iter().map(|&i| sessions[i].clone()).collect();
    let mut train: Vec<&SessionRecord> = train_idx.iter().map(|&i| &sessions[i]).collect();

    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    for epoch in 1..=cfg.max_epochs {
        train.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_grad(&model, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("environment loss is {loss} at epoch {epoch}, batch {b}")));
            }
            train_loss += loss;
            grads.scale(1.0 / batch.len() as f64);
            model
                .params
                .adagrad_step(&grads, cfg.lr)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        train_loss /= train.len() as f64;
        let heldout_loss = if heldout.is_empty() {
            train_loss
        } else {
            position_log_loss(&model, &heldout)?
        };
        epochs.push(EnvEpoch {
            epoch,
            train_loss,
            heldout_loss,
        });
        if heldout_loss < best.0 {
            best = (heldout_loss, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best;
    let model = SimEnvModel::bind(params, model.shape.clone(), model.user_dim, model.item_dim)?;
    Ok(EnvTraining {
        model,
        epochs,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::{item, session};
    use crate::nn::Tensor;

    fn user() -> User {
        User {
            id: "u".into(),
            features: vec![1.0, 0.5],
        }
    }

    fn small_shape() -> SimEnvShape {
        SimEnvShape {
            d_model: 6,
            fusion_hidden: vec![8, 6],
            head_hidden: vec![5],
            d_ff: 8,
            max_len: 4,
        }
    }

    fn model() -> SimEnvModel {
        SimEnvModel::new(2, 3, small_shape(), 3).unwrap()
    }

    fn items() -> Vec<Item> {
        vec![
            item("a", 0, vec![0.3, -1.0, 0.5]),
            item("b", 1, vec![1.2, 0.4, -0.7]),
            item("c", 2, vec![-0.2, 0.9, 0.1]),
            item("d", 0, vec![0.6, 0.0, 1.1]),
        ]
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = model();
        let out = m.params.id("env.out.w").unwrap();
        let shape = m.params.get(out).shape().to_vec();
        m.params.set("env.out.w", Tensor::zeros(&shape)).unwrap();
        let it = items();
        let e = m.estimate(&user(), &[&it[0], &it[1]]).unwrap();
        assert_eq!(e.ctr, 0.5);
        assert_eq!(e.pbr, 0.5);
    }

    #[test]
    fn estimates_strictly_inside_unit_interval_and_deterministic() {
        let m = model();
        let it = items();
        let h: Vec<&Item> = it.iter().collect();
        let a = m.estimates(&user(), &h).unwrap();
        let b = m.estimates(&user(), &h).unwrap();
        assert_eq!(a, b);
        for e in a {
            assert!(e.ctr > 0.0 && e.ctr < 1.0 && e.pbr > 0.0 && e.pbr < 1.0);
        }
    }

    #[test]
    fn prefix_is_causal() {
        let m = model();
        let it = items();
        let full = m.estimates(&user(), &[&it[0], &it[1], &it[2]]).unwrap();
        let other = m.estimates(&user(), &[&it[0], &it[1], &it[3]]).unwrap();
        assert_eq!(full[..2], other[..2]);
        let direct = m.estimate(&user(), &[&it[0], &it[1]]).unwrap();
        assert_eq!(direct, full[1]);
    }

    #[test]
    fn position_bias_is_modeled() {
        let m = model();
        let it = items();
        let a = m.estimate(&user(), &[&it[0], &it[1], &it[2]]).unwrap();
        let b = m.estimate(&user(), &[&it[1], &it[0], &it[2]]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn equal_positions_make_prefix_order_irrelevant() {
        let mut m = model();
        let pos = m.params.id("env.encoder.pos").unwrap();
        let shape = m.params.get(pos).shape().to_vec();
        let row: Vec<f64> = (0..shape[1]).map(|j| 0.1 * j as f64).collect();
        let data = row.iter().cycle().take(shape[0] * shape[1]).copied().collect();
        m.params.set("env.encoder.pos", Tensor::new(shape, data).unwrap()).unwrap();
        let it = items();
        let a = m.estimate(&user(), &[&it[0], &it[1], &it[2]]).unwrap();
        let b = m.estimate(&user(), &[&it[1], &it[0], &it[2]]).unwrap();
        assert!((a.ctr - b.ctr).abs() < 1e-12 && (a.pbr - b.pbr).abs() < 1e-12);
    }

    #[test]
    fn capacity_edges() {
        let m = model();
        let mut it = items();
        let h: Vec<&Item> = it[..3].iter().collect();
        assert!(m.rollout_estimate(&user(), &h, &it[3]).is_ok());
        it.push(item("e", 1, vec![0.0, 0.0, 0.0]));
        let h: Vec<&Item> = it[..4].iter().collect();
        assert!(matches!(m.rollout_estimate(&user(), &h, &it[4]), Err(Error::Capacity(_))));
        assert!(matches!(m.rollout_estimate(&user(), &h[..2], &it[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn half_probabilities_cost_two_ln2_per_position() {
        let mut m = model();
        for name in ["env.out.w", "env.out.b"] {
            let id = m.params.id(name).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let s = with_features(session("s", &[true, false, true], true));
        let l = env_loss(&m, &[s]).unwrap();
        assert!((l - 3.0 * 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn with_features(mut s: SessionRecord) -> SessionRecord {
        s.user = user();
        for (k, imp) in s.impressions.iter_mut().enumerate() {
            imp.item.features = vec![0.1 * k as f64, 1.0 - 0.2 * k as f64, 0.3];
        }
        s
    }

    #[test]
    fn empty_dataset_is_error() {
        assert!(matches!(train_env(&[], &EnvTrainConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn tiny_fixture_loss_decreases() {
        let sessions: Vec<SessionRecord> = [
            session("a", &[true, false], true),
            session("b", &[false, false, true], false),
            session("c", &[true], true),
            session("d", &[false, true, false], true),
        ]
        .into_iter()
        .map(with_features)
        .collect();
        let mut m = model();
        let mut prev = env_loss(&m, &sessions).unwrap();
        for _ in 0..200 {
            let refs: Vec<&SessionRecord> = sessions.iter().collect();
            let (_, mut g) = batch_grad(&m, &refs).unwrap();
            g.scale(0.25);
            m.params.sgd_step(&g, 1e-3).unwrap();
            let l = env_loss(&m, &sessions).unwrap();
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let sessions: Vec<SessionRecord> = (0..20)
            .map(|i| with_features(session(&format!("s{i}"), &[i % 2 == 0, i % 3 == 0], i % 4 == 0)))
            .collect();
        let cfg = EnvTrainConfig {
            shape: small_shape(),
            max_epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let a = train_env(&sessions, &cfg).unwrap();
        let b = train_env(&sessions, &cfg).unwrap();
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        let back = SimEnvModel::from_checkpoint(Checkpoint::from_bytes(&a.model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params.flatten(), a.model.params.flatten());
        assert_eq!(back.shape, a.model.shape);
    }
}
