//! Reverse-mode differentiation over a flat tape.
//!
//! A [`Graph`] borrows a frozen [`ParamStore`], records every operation as it
//! is evaluated, and replays the tape backwards on request. Parameter values
//! are never copied into the tape.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Logit bound equivalent to clamping probabilities to `[1e-12, 1 - 1e-12]`.
pub const LOGIT_CLAMP: f64 = 27.631_021_115_871_44;

/// Layer-normalization variance offset.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    FmCross(Var, Var),
    Gru(Box<GruTape>),
    RowSoftmax { x: Var, causal: bool },
    LayerNorm(Box<LayerNormTape>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    MaskedLogSoftmaxAt { x: Var, mask: Vec<bool>, index: usize, probs: Vec<f64> },
    BceWithLogits { x: Var, labels: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct GruTape {
    x: Var,
    h: Var,
    wi: Var,
    wh: Var,
    bi: Var,
    bh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug)]
struct LayerNormTape {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-param node carries a value"),
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("lhs {m}x{k} vs rhs {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Self::mat(m, n, out)))
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("input has {n} columns, bias has {}", self.value(b).len()),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddBias(x, b), Self::mat(m, n, out)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::dim(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), Self::mat(m, n, out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), Self::mat(m, n, out)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Op::Scale(x, c), Self::mat(m, n, out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), Self::mat(m, n, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), Self::mat(m, n, out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(x), Self::mat(n, m, out))
    }

    /// Field-pair cross features: row `r` of the output holds
    /// `u[a] * items[r][b]` at column `a * n_i + b` (user index outer).
    pub fn fm_cross(&mut self, u: Var, items: Var) -> Result<Var> {
        let nu = self.value(u).len();
        let (m, ni) = self.dims(items);
        if nu == 0 || ni == 0 || m == 0 {
            return Err(Error::Argument(format!(
                "fm_cross needs non-empty features (user {nu}, item {ni}, rows {m})"
            )));
        }
        let uv = self.value(u).data();
        let iv = self.value(items).data();
        let mut out = Vec::with_capacity(m * nu * ni);
        for r in 0..m {
            let row = &iv[r * ni..(r + 1) * ni];
            for &ua in uv {
                out.extend(row.iter().map(|ib| ua * ib));
            }
        }
        Ok(self.push(Op::FmCross(u, items), Self::mat(m, nu * ni, out)))
    }

    /// GRU recurrence over `m` independent rows.
    ///
    /// Gate blocks inside `wi`, `wh`, `bi`, `bh` are ordered reset, update,
    /// candidate:
    /// `r = s(x Wr + br + h Ur + cr)`, `z = s(x Wz + bz + h Uz + cz)`,
    /// `n = tanh(x Wn + bn + r * (h Un + cn))`, `h' = (1 - z) * n + z * h`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wi: Var, wh: Var, bi: Var, bh: Var) -> Result<Var> {
        let (m, nin) = self.dims(x);
        let (mh, d) = self.dims(h);
        if m != mh {
            return Err(Error::dim("gru_cell", format!("x has {m} rows, h has {mh}")));
        }
        if self.dims(wi) != (nin, 3 * d) {
            return Err(Error::dim(
                "gru_cell",
                format!("input weights {:?}, expected ({nin}, {})", self.dims(wi), 3 * d),
            ));
        }
        if self.dims(wh) != (d, 3 * d) {
            return Err(Error::dim(
                "gru_cell",
                format!("hidden weights {:?}, expected ({d}, {})", self.dims(wh), 3 * d),
            ));
        }
        if self.value(bi).len() != 3 * d || self.value(bh).len() != 3 * d {
            return Err(Error::dim("gru_cell", format!("bias sets must have {} values", 3 * d)));
        }
        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let mut gi = matmul(xv, self.value(wi).data(), m, nin, 3 * d);
        let mut gh = matmul(hv, self.value(wh).data(), m, d, 3 * d);
        let biv = self.value(bi).data();
        let bhv = self.value(bh).data();
        for row in 0..m {
            for j in 0..3 * d {
                gi[row * 3 * d + j] += biv[j];
                gh[row * 3 * d + j] += bhv[j];
            }
        }
        let mut r = vec![0.0; m * d];
        let mut z = vec![0.0; m * d];
        let mut n = vec![0.0; m * d];
        let mut hn = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        for row in 0..m {
            let o = row * 3 * d;
            for j in 0..d {
                let k = row * d + j;
                r[k] = sigmoid(gi[o + j] + gh[o + j]);
                z[k] = sigmoid(gi[o + d + j] + gh[o + d + j]);
                hn[k] = gh[o + 2 * d + j];
                n[k] = (gi[o + 2 * d + j] + r[k] * hn[k]).tanh();
                out[k] = (1.0 - z[k]) * n[k] + z[k] * hv[k];
            }
        }
        let tape = GruTape {
            x,
            h,
            wi,
            wh,
            bi,
            bh,
            r,
            z,
            n,
            hn,
        };
        Ok(self.push(Op::Gru(Box::new(tape)), Self::mat(m, d, out)))
    }

    /// Row-wise softmax; with `causal`, row `i` only spans columns `0..=i`.
    pub fn row_softmax(&mut self, x: Var, causal: bool) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            let row = &src[i * n..i * n + width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                s += e;
            }
            for o in &mut out[i * n..i * n + width] {
                *o /= s;
            }
        }
        self.push(Op::RowSoftmax { x, causal }, Self::mat(m, n, out))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim("layer_norm", format!("gain/bias must have {n} values")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        let tape = LayerNormTape {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Op::LayerNorm(Box::new(tape)), Self::mat(m, n, out)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m || len == 0 {
            return Err(Error::Capacity(format!(
                "rows {start}..{} requested from a {m}-row tensor",
                start + len
            )));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, Self::mat(len, n, out)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, Self::mat(m, len, out)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::dim("concat_rows", format!("{pn} columns vs {n}")));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Self::mat(m, n, out)))
    }

    /// Softmax over the flattened values of `x`; entries with `mask[i] == true`
    /// are excluded and receive probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let probs = masked_softmax(t.data(), mask)?;
        Ok(self.push(
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            Tensor::new(shape, probs).expect("same shape"),
        ))
    }

    /// `log softmax(x)[index]` with masked entries excluded; a `1 x 1` node.
    pub fn masked_log_softmax_at(&mut self, x: Var, mask: &[bool], index: usize) -> Result<Var> {
        let logits = self.value(x).data();
        if index >= logits.len() || mask[index] {
            return Err(Error::Contract(format!(
                "log-probability requested for masked or out-of-range entry {index}"
            )));
        }
        let (lse, probs) = masked_logsumexp(logits, mask)?;
        let lp = logits[index] - lse;
        Ok(self.push(
            Op::MaskedLogSoftmaxAt {
                x,
                mask: mask.to_vec(),
                index,
                probs,
            },
            Self::mat(1, 1, vec![lp]),
        ))
    }

    /// Summed binary cross-entropy of `sigmoid(x)` against `labels`, with the
    /// probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce_with_logits(&mut self, x: Var, labels: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != labels.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits vs {} labels", xv.len(), labels.len()),
            ));
        }
        let loss = xv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                softplus(z) - y * z
            })
            .sum();
        Ok(self.push(
            Op::BceWithLogits {
                x,
                labels: labels.to_vec(),
            },
            Self::mat(1, 1, vec![loss]),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Self::mat(1, 1, vec![s]))
    }

    /// Backpropagates `sum_i coef_i * seed_i` from scalar seed nodes.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Backward {
        let seeds: Vec<(Var, Vec<f64>)> = seeds
            .iter()
            .map(|&(v, c)| {
                debug_assert_eq!(self.value(v).len(), 1, "backward seed must be scalar");
                (v, vec![c])
            })
            .collect();
        self.backward_from(&seeds)
    }

    /// Backpropagates arbitrary upstream gradients attached to any nodes.
    pub fn backward_from(&self, seeds: &[(Var, Vec<f64>)]) -> Backward {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads = self.params.zero_grads();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient shape");
            accumulate(&mut grads, *v, g);
            last = last.max(v.0);
        }
        for idx in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads, &mut param_grads);
            grads[idx] = Some(gy);
        }
        Backward {
            nodes: grads,
            params: param_grads,
        }
    }

    fn backward_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>], pg: &mut Grads) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(id) => {
                let t = pg.get_mut(*id);
                for (a, b) in t.data_mut().iter_mut().zip(gy) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_acc(gy, self.value(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_acc(self.value(*a).data(), gy, m, k, n, &mut gb);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::AddBias(x, b) => {
                let n = self.dims(*x).1;
                let mut gb = vec![0.0; n];
                for row in gy.chunks(n) {
                    for (g, r) in gb.iter_mut().zip(row) {
                        *g += r;
                    }
                }
                accumulate(grads, *x, gy);
                accumulate(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy);
                accumulate(grads, *b, gy);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                let gx: Vec<f64> = gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                let gx: Vec<f64> = gy.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = gy[j * m + i];
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::FmCross(u, items) => {
                let uv = self.value(*u).data();
                let (m, ni) = self.dims(*items);
                let iv = self.value(*items).data();
                let nu = uv.len();
                let mut gu = vec![0.0; nu];
                let mut gi = vec![0.0; m * ni];
                for r in 0..m {
                    for a in 0..nu {
                        let off = r * nu * ni + a * ni;
                        for b in 0..ni {
                            let g = gy[off + b];
                            gu[a] += g * iv[r * ni + b];
                            gi[r * ni + b] += g * uv[a];
                        }
                    }
                }
                accumulate(grads, *u, &gu);
                accumulate(grads, *items, &gi);
            }
            Op::Gru(t) => self.backward_gru(t, gy, grads),
            Op::RowSoftmax { x, causal } => {
                let (m, n) = self.dims(*x);
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let width = if *causal { (i + 1).min(n) } else { n };
                    let o = i * n;
                    let dot: f64 = (0..width).map(|j| y[o + j] * gy[o + j]).sum();
                    for j in 0..width {
                        gx[o + j] = y[o + j] * (gy[o + j] - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm(t) => {
                let (m, n) = self.dims(t.x);
                let g = self.value(t.gain).data();
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                let nf = n as f64;
                for i in 0..m {
                    let o = i * n;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = gy[o + j] * g[j];
                        sum_d += d;
                        sum_dx += d * t.xhat[o + j];
                        ggain[j] += gy[o + j] * t.xhat[o + j];
                        gbias[j] += gy[o + j];
                    }
                    for j in 0..n {
                        let d = gy[o + j] * g[j];
                        gx[o + j] = t.inv_std[i] / nf * (nf * d - sum_d - t.xhat[o + j] * sum_dx);
                    }
                }
                accumulate(grads, t.x, &gx);
                accumulate(grads, t.gain, &ggain);
                accumulate(grads, t.bias, &gbias);
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let mut gx = vec![0.0; m * n];
                gx[start * n..start * n + gy.len()].copy_from_slice(gy);
                accumulate(grads, *x, &gx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = gy.len() / m;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, &gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = self.value(p).len();
                    accumulate(grads, p, &gy[off..off + l]);
                    off += l;
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                let dot: f64 = y.iter().zip(gy).map(|(p, g)| p * g).sum();
                let gx: Vec<f64> = (0..y.len())
                    .map(|j| if mask[j] { 0.0 } else { y[j] * (gy[j] - dot) })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::MaskedLogSoftmaxAt {
                x,
                mask,
                index,
                probs,
            } => {
                let g = gy[0];
                let gx: Vec<f64> = (0..probs.len())
                    .map(|j| {
                        if mask[j] {
                            0.0
                        } else {
                            let delta = if j == *index { 1.0 } else { 0.0 };
                            g * (delta - probs[j])
                        }
                    })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::BceWithLogits { x, labels } => {
                let g = gy[0];
                let gx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| {
                        if z.abs() > LOGIT_CLAMP {
                            0.0
                        } else {
                            g * (sigmoid(z) - y)
                        }
                    })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let l = self.value(*x).len();
                accumulate(grads, *x, &vec![gy[0]; l]);
            }
        }
    }

    fn backward_gru(&self, t: &GruTape, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, nin) = self.dims(t.x);
        let d = self.dims(t.h).1;
        let hv = self.value(t.h).data();
        let mut gi = vec![0.0; m * 3 * d];
        let mut gh_pre = vec![0.0; m * 3 * d];
        let mut gh = vec![0.0; m * d];
        for row in 0..m {
            let o = row * 3 * d;
            for j in 0..d {
                let k = row * d + j;
                let g = gy[k];
                let (r, z, n, hn) = (t.r[k], t.z[k], t.n[k], t.hn[k]);
                let dn_pre = g * (1.0 - z) * (1.0 - n * n);
                let dz_pre = g * (hv[k] - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                gh[k] = g * z;
                gi[o + j] = dr_pre;
                gi[o + d + j] = dz_pre;
                gi[o + 2 * d + j] = dn_pre;
                gh_pre[o + j] = dr_pre;
                gh_pre[o + d + j] = dz_pre;
                gh_pre[o + 2 * d + j] = dn_pre * r;
            }
        }
        let mut gx = vec![0.0; m * nin];
        matmul_a_bt_acc(&gi, self.value(t.wi).data(), m, 3 * d, nin, &mut gx);
        matmul_a_bt_acc(&gh_pre, self.value(t.wh).data(), m, 3 * d, d, &mut gh);
        let mut gwi = vec![0.0; nin * 3 * d];
        matmul_at_b_acc(self.value(t.x).data(), &gi, m, nin, 3 * d, &mut gwi);
        let mut gwh = vec![0.0; d * 3 * d];
        matmul_at_b_acc(hv, &gh_pre, m, d, 3 * d, &mut gwh);
        let mut gbi = vec![0.0; 3 * d];
        let mut gbh = vec![0.0; 3 * d];
        for row in 0..m {
            for j in 0..3 * d {
                gbi[j] += gi[row * 3 * d + j];
                gbh[j] += gh_pre[row * 3 * d + j];
            }
        }
        accumulate(grads, t.x, &gx);
        accumulate(grads, t.h, &gh);
        accumulate(grads, t.wi, &gwi);
        accumulate(grads, t.wh, &gwh);
        accumulate(grads, t.bi, &gbi);
        accumulate(grads, t.bh, &gbh);
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward pass.
pub struct Backward {
    nodes: Vec<Option<Vec<f64>>>,
    params: Grads,
}

impl Backward {
    /// Gradient with respect to any recorded node (None when unreached).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}

fn masked_logsumexp(logits: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if mask.len() != logits.len() {
        return Err(Error::dim(
            "masked_softmax",
            format!("{} logits vs {} mask entries", logits.len(), mask.len()),
        ));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyActionSet);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { 0.0 } else { (v - max).exp() })
        .collect();
    let s: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= s;
    }
    Ok((max + s.ln(), probs))
}

/// Softmax restricted to entries where `mask` is false.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    masked_logsumexp(logits, mask).map(|(_, p)| p)
}
