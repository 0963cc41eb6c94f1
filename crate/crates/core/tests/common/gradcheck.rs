//! Central finite differences against the tape's reverse-mode gradients.
//!
//! Every check projects the output onto random weights `w`, so the scalar
//! `sum(w * f(x))` exercises the full Jacobian. Error is the norm-relative
//! difference `|a - n| / (|a| + |n|)` over all checked coordinates.

use cterank::data::{Impression, Item, SessionRecord, User};
use cterank::nn::{Fusion, GruParams, Graph, Linear, Mlp, ParamId, ParamStore, Tensor, TransformerBlock, TransformerShape, Var};
use cterank::policy::{CarryMode, PolicyModel, PolicyShape, PolicyTape};
use cterank::simenv::{SimEnvModel, SimEnvShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Parameter coordinates sampled per instance for the larger models.
const MAX_COORDS: usize = 60;

pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_error < TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Var;

fn project(ps: &ParamStore, inputs: &[Tensor], f: &OpFn, w: &[f64]) -> f64 {
    let mut g = Graph::new(ps);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).data().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Gradient check with respect to every input coordinate of `f`.
fn check_inputs(inputs: Vec<Tensor>, f: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let ps = ParamStore::new();
    let mut g = Graph::new(&ps);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| normal(rng)).collect();
    let back = g.backward_from(&[(out, w.clone())]);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let grad = back.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            numeric.push((project(&ps, &plus, f, &w) - project(&ps, &minus, f, &w)) / (2.0 * STEP));
            analytic.push(grad[i]);
        }
    }
    relative_error(&analytic, &numeric)
}

/// Coordinates `(param, index)` to perturb: all of them for small stores,
/// otherwise a random sample.
fn coordinates(ps: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = ps.ids().flat_map(|id| (0..ps.get(id).len()).map(move |i| (id, i))).collect();
    if all.len() <= MAX_COORDS {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), MAX_COORDS).into_iter().map(|i| all[i]).collect()
}

/// Gradient check with respect to the parameters of a scalar objective.
fn check_params(ps: &ParamStore, loss: &dyn Fn(&ParamStore) -> (f64, Option<cterank::nn::Grads>), rng: &mut ChaCha8Rng) -> f64 {
    let (_, grads) = loss(ps);
    let grads = grads.expect("analytic gradient");
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (id, i) in coordinates(ps, rng) {
        let mut plus = ps.clone();
        plus.get_mut(id).data_mut()[i] += STEP;
        let mut minus = ps.clone();
        minus.get_mut(id).data_mut()[i] -= STEP;
        numeric.push((loss(&plus).0 - loss(&minus).0) / (2.0 * STEP));
        analytic.push(grads.get(id).data()[i]);
    }
    relative_error(&analytic, &numeric)
}

/// Builds a projected scalar objective over parameters from a graph builder.
fn param_objective<'a>(
    build: &'a dyn Fn(&mut Graph) -> Var,
    w: &'a [f64],
) -> impl Fn(&ParamStore) -> (f64, Option<cterank::nn::Grads>) + 'a {
    move |ps| {
        let mut g = Graph::new(ps);
        let out = build(&mut g);
        let value = g.value(out).data().iter().zip(w).map(|(a, b)| a * b).sum();
        let grads = g.backward_from(&[(out, w.to_vec())]).into_params();
        (value, Some(grads))
    }
}

fn output_len(ps: &ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> usize {
    let mut g = Graph::new(ps);
    let out = build(&mut g);
    g.value(out).len()
}

fn run(name: &str, rng: &mut ChaCha8Rng, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> CheckResult {
    let max_error = (0..INSTANCES).map(|_| one(rng)).fold(0.0, f64::max);
    CheckResult {
        name: name.into(),
        instances: INSTANCES,
        max_error,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> (Vec<bool>, usize) {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    let keep = rng.gen_range(0..n);
    mask[keep] = false;
    (mask, keep)
}

/// Every differentiable graph operation.
pub fn check_ops(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(run("matmul", r, |r| {
        let (m, k, n) = dims(r);
        check_inputs(vec![randn(r, &[m, k]), randn(r, &[k, n])], &|g, v| g.matmul(v[0], v[1]).unwrap(), r)
    }));
    out.push(run("add_bias", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n]), randn(r, &[n])], &|g, v| g.add_bias(v[0], v[1]).unwrap(), r)
    }));
    out.push(run("add", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n]), randn(r, &[m, n])], &|g, v| g.add(v[0], v[1]).unwrap(), r)
    }));
    out.push(run("mul", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n]), randn(r, &[m, n])], &|g, v| g.mul(v[0], v[1]).unwrap(), r)
    }));
    out.push(run("scale", r, |r| {
        let (m, n, _) = dims(r);
        let c = normal(r);
        check_inputs(vec![randn(r, &[m, n])], &move |g, v| g.scale(v[0], c), r)
    }));
    out.push(run("tanh", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n])], &|g, v| g.tanh(v[0]), r)
    }));
    out.push(run("sigmoid", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n])], &|g, v| g.sigmoid(v[0]), r)
    }));
    out.push(run("transpose", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n])], &|g, v| g.transpose(v[0]), r)
    }));
    out.push(run("fm_cross", r, |r| {
        let (m, nu, ni) = dims(r);
        check_inputs(vec![randn(r, &[nu]), randn(r, &[m, ni])], &|g, v| g.fm_cross(v[0], v[1]).unwrap(), r)
    }));
    out.push(run("gru_cell", r, |r| {
        let (m, d_in, h) = dims(r);
        let inputs = vec![
            randn(r, &[m, d_in]),
            randn(r, &[m, h]),
            randn(r, &[d_in, 3 * h]),
            randn(r, &[h, 3 * h]),
            randn(r, &[3 * h]),
            randn(r, &[3 * h]),
        ];
        check_inputs(inputs, &|g, v| g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap(), r)
    }));
    out.push(run("row_softmax", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n])], &|g, v| g.row_softmax(v[0], false), r)
    }));
    out.push(run("row_softmax_causal", r, |r| {
        let t = r.gen_range(1..6);
        check_inputs(vec![randn(r, &[t, t])], &|g, v| g.row_softmax(v[0], true), r)
    }));
    out.push(run("layer_norm", r, |r| {
        let m = r.gen_range(1..4);
        let n = r.gen_range(2..6);
        let inputs = vec![randn(r, &[m, n]), randn(r, &[n]), randn(r, &[n])];
        check_inputs(inputs, &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(), r)
    }));
    out.push(run("slice_rows", r, |r| {
        let (m, n, _) = dims(r);
        let start = r.gen_range(0..m);
        let len = r.gen_range(1..=m - start);
        check_inputs(vec![randn(r, &[m, n])], &move |g, v| g.slice_rows(v[0], start, len).unwrap(), r)
    }));
    out.push(run("slice_cols", r, |r| {
        let (m, n, _) = dims(r);
        let start = r.gen_range(0..n);
        let len = r.gen_range(1..=n - start);
        check_inputs(vec![randn(r, &[m, n])], &move |g, v| g.slice_cols(v[0], start, len).unwrap(), r)
    }));
    out.push(run("concat_rows", r, |r| {
        let (a, b, n) = dims(r);
        check_inputs(vec![randn(r, &[a, n]), randn(r, &[b, n])], &|g, v| g.concat_rows(v).unwrap(), r)
    }));
    out.push(run("masked_softmax", r, |r| {
        let n = r.gen_range(1..7);
        let (mask, _) = random_mask(r, n);
        check_inputs(vec![randn(r, &[1, n])], &move |g, v| g.masked_softmax(v[0], &mask).unwrap(), r)
    }));
    out.push(run("masked_log_softmax_at", r, |r| {
        let n = r.gen_range(1..7);
        let (mask, keep) = random_mask(r, n);
        check_inputs(vec![randn(r, &[1, n])], &move |g, v| g.masked_log_softmax_at(v[0], &mask, keep).unwrap(), r)
    }));
    out.push(run("bce_with_logits", r, |r| {
        let (m, n, _) = dims(r);
        let labels: Vec<f64> = (0..m * n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        check_inputs(vec![randn(r, &[m, n])], &move |g, v| g.bce_with_logits(v[0], &labels).unwrap(), r)
    }));
    out.push(run("sum", r, |r| {
        let (m, n, _) = dims(r);
        check_inputs(vec![randn(r, &[m, n])], &|g, v| g.sum(v[0]), r)
    }));
    out
}

fn layer_check(r: &mut ChaCha8Rng, ps: &ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let w: Vec<f64> = (0..output_len(ps, build)).map(|_| normal(r)).collect();
    let objective = param_objective(build, &w);
    check_params(ps, &objective, r)
}

/// Parameter gradients of every layer.
pub fn check_layers(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    for bias in [true, false] {
        let name = if bias { "linear" } else { "linear_no_bias" };
        out.push(run(name, r, |r| {
            let (m, a, b) = dims(r);
            let mut ps = ParamStore::new();
            let lin = Linear::new(&mut ps, "l", a, b, bias, r);
            let x = randn(r, &[m, a]);
            layer_check(r, &ps, &|g| {
                let xv = g.input(x.clone());
                lin.forward(g, xv).unwrap()
            })
        }));
    }
    out.push(run("mlp", r, |r| {
        let (m, a, b) = dims(r);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "m", a, &[b + 1, 2], r);
        let x = randn(r, &[m, a]);
        layer_check(r, &ps, &|g| {
            let xv = g.input(x.clone());
            mlp.forward(g, xv).unwrap()
        })
    }));
    out.push(run("fusion", r, |r| {
        let (m, du, di) = dims(r);
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, "f", du, di, &[4, 3], r);
        let user: Vec<f64> = randn(r, &[du]).into_data();
        let items: Vec<Vec<f64>> = (0..m).map(|_| randn(r, &[di]).into_data()).collect();
        layer_check(r, &ps, &|g| {
            let rows: Vec<&[f64]> = items.iter().map(Vec::as_slice).collect();
            f.forward(g, &user, &rows).unwrap()
        })
    }));
    out.push(run("gru", r, |r| {
        let (m, d_in, h) = dims(r);
        let mut ps = ParamStore::new();
        let gru = GruParams::new(&mut ps, "g", d_in, h, r);
        for id in [gru.bi, gru.bh] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.5 * normal(r));
        }
        let x = randn(r, &[m, d_in]);
        let h0 = randn(r, &[m, h]);
        layer_check(r, &ps, &|g| {
            let xv = g.input(x.clone());
            let hv = g.input(h0.clone());
            let h1 = gru.step(g, xv, hv).unwrap();
            gru.step(g, xv, h1).unwrap()
        })
    }));
    for causal in [true, false] {
        let name = if causal { "transformer_causal" } else { "transformer" };
        out.push(run(name, r, |r| {
            let d = r.gen_range(2..6);
            let t = r.gen_range(1..5);
            let shape = TransformerShape {
                d_model: d,
                d_ff: r.gen_range(2..6),
                max_len: 5,
                causal,
            };
            let mut ps = ParamStore::new();
            let block = TransformerBlock::new(&mut ps, "t", shape, r);
            for id in [block.ln1_b, block.ln2_b] {
                ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3 * normal(r));
            }
            let x = randn(r, &[t, d]);
            layer_check(r, &ps, &|g| {
                let xv = g.input(x.clone());
                block.forward(g, xv).unwrap().hidden
            })
        }));
    }
    out
}

fn random_item(r: &mut ChaCha8Rng, i: usize, dim: usize) -> Item {
    Item {
        id: format!("i{i}"),
        features: randn(r, &[dim]).into_data(),
        category: r.gen_range(0..3),
    }
}

fn random_user(r: &mut ChaCha8Rng, dim: usize) -> User {
    User {
        id: "u".into(),
        features: randn(r, &[dim]).into_data(),
    }
}

/// The environment's training loss and the policy's log-probability of a
/// recorded action sequence, differentiated end to end.
pub fn check_networks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(run("simenv_loss", r, |r| {
        let (du, di) = (r.gen_range(1..4), r.gen_range(1..4));
        let shape = SimEnvShape {
            d_model: 6,
            fusion_hidden: vec![8, 6],
            head_hidden: vec![5],
            d_ff: 7,
            max_len: 6,
        };
        let model = SimEnvModel::new(du, di, shape, r.gen()).unwrap();
        let t = r.gen_range(1..=6);
        let bounce_at = r.gen_bool(0.5);
        let session = SessionRecord {
            session_id: "s".into(),
            user: random_user(r, du),
            impressions: (0..t)
                .map(|j| Impression {
                    position: j + 1,
                    item: random_item(r, j, di),
                    click: r.gen_bool(0.4),
                    bounce: bounce_at && j + 1 == t,
                })
                .collect(),
            pool: None,
            censored: !bounce_at,
        };
        let loss = |ps: &ParamStore| {
            let mut g = Graph::new(ps);
            let l = model.session_loss(&mut g, &session).unwrap();
            let grads = g.backward(&[(l, 1.0)]).into_params();
            (g.scalar(l), Some(grads))
        };
        check_params(&model.params, &loss, r)
    }));
    for carry in [CarryMode::Last, CarryMode::Chosen] {
        let name = match carry {
            CarryMode::Last => "policy_log_prob",
            CarryMode::Chosen => "policy_log_prob_carry_chosen",
        };
        out.push(run(name, r, |r| {
            let (du, di) = (r.gen_range(1..4), r.gen_range(1..4));
            let shape = PolicyShape {
                d_model: 5,
                fusion_hidden: vec![7, 5],
                carry,
            };
            let model = PolicyModel::new(du, di, shape, r.gen()).unwrap();
            let n = r.gen_range(2..6);
            let user = random_user(r, du);
            let pool: Vec<Item> = (0..n).map(|i| random_item(r, i, di)).collect();
            let k = r.gen_range(1..=n);
            let mut actions: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(actions.as_mut_slice(), r);
            actions.truncate(k);
            let coefs: Vec<f64> = (0..k).map(|_| normal(r)).collect();
            let loss = |ps: &ParamStore| {
                let m = model.with_params(ps.clone()).unwrap();
                let refs: Vec<&Item> = pool.iter().collect();
                let mut tape = PolicyTape::new(&m, &user, &refs).unwrap();
                let mut mask = vec![false; n];
                let mut value = 0.0;
                for (&a, c) in actions.iter().zip(&coefs) {
                    tape.distribution(&mask).unwrap();
                    value += c * tape.commit(&mask, a).unwrap();
                    mask[a] = true;
                }
                let seeds: Vec<(Var, f64)> = tape.log_probs.iter().copied().zip(coefs.iter().copied()).collect();
                (value, Some(tape.graph.backward(&seeds).into_params()))
            };
            check_params(&model.params, &loss, r)
        }));
    }
    out
}

pub fn check_all(seed: u64) -> Vec<CheckResult> {
    let mut all = check_ops(seed);
    all.extend(check_layers(seed + 1));
    all.extend(check_networks(seed + 2));
    all
}
