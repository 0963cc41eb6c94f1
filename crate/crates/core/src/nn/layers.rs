use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| ps.add_zeros(format!("{name}.b"), &[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Looks the layer's parameters up by name in an existing store.
    pub fn bind(ps: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        let w = lookup(ps, &format!("{name}.w"))?;
        let shape = ps.get(w).shape();
        let (fan_in, fan_out) = (shape[0], shape[1]);
        let b = if bias {
            Some(lookup(ps, &format!("{name}.b"))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

pub(crate) fn lookup(ps: &ParamStore, name: &str) -> Result<ParamId> {
    ps.id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

/// Stack of tanh-activated affine layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(ps, &format!("{name}.l{i}"), fan_in, w, true, rng));
            fan_in = w;
        }
        Self { layers }
    }

    pub fn bind(ps: &ParamStore, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Linear::bind(ps, &format!("{name}.l{i}"), true))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            let y = l.forward(g, x)?;
            x = g.tanh(y);
        }
        Ok(x)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Cross-feature fusion: `e = MLP(FM(user, item))` for every item row.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mlp: Mlp,
    pub user_dim: usize,
    pub item_dim: usize,
}

impl Fusion {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        user_dim: usize,
        item_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(ps, &format!("{name}.mlp"), user_dim * item_dim, widths, rng),
            user_dim,
            item_dim,
        }
    }

    pub fn bind(ps: &ParamStore, name: &str, user_dim: usize, item_dim: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::bind(ps, &format!("{name}.mlp"), depth)?,
            user_dim,
            item_dim,
        })
    }

    /// Fuses one user with `items` (one feature row per item).
    pub fn forward(&self, g: &mut Graph, user: &[f64], items: &[&[f64]]) -> Result<Var> {
        if user.len() != self.user_dim {
            return Err(Error::dim(
                "fusion",
                format!("user features have {} values, expected {}", user.len(), self.user_dim),
            ));
        }
        let mut flat = Vec::with_capacity(items.len() * self.item_dim);
        for it in items {
            if it.len() != self.item_dim {
                return Err(Error::dim(
                    "fusion",
                    format!("item features have {} values, expected {}", it.len(), self.item_dim),
                ));
            }
            flat.extend_from_slice(it);
        }
        let u = g.input(Tensor::vector(user.to_vec()));
        let x = g.input(Tensor::matrix(items.len(), self.item_dim, flat)?);
        let cross = g.fm_cross(u, x)?;
        self.mlp.forward(g, cross)
    }
}

/// GRU parameters: stacked input weights, hidden weights and the two bias sets.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        // Each gate block gets its own Glorot range.
        let mut stack = |ps: &mut ParamStore, suffix: &str, rows: usize| {
            let bound = (6.0 / (rows + hidden) as f64).sqrt();
            let mut data = vec![0.0; rows * 3 * hidden];
            for v in data.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
            ps.add(
                format!("{name}.{suffix}"),
                Tensor::new(vec![rows, 3 * hidden], data).unwrap(),
            )
        };
        let wi = stack(ps, "wi", input);
        let wh = stack(ps, "wh", hidden);
        let bi = ps.add_zeros(format!("{name}.bi"), &[3 * hidden]);
        let bh = ps.add_zeros(format!("{name}.bh"), &[3 * hidden]);
        Self {
            wi,
            wh,
            bi,
            bh,
            input,
            hidden,
        }
    }

    pub fn bind(ps: &ParamStore, name: &str) -> Result<Self> {
        let wi = lookup(ps, &format!("{name}.wi"))?;
        let wh = lookup(ps, &format!("{name}.wh"))?;
        Ok(Self {
            wi,
            wh,
            bi: lookup(ps, &format!("{name}.bi"))?,
            bh: lookup(ps, &format!("{name}.bh"))?,
            input: ps.get(wi).shape()[0],
            hidden: ps.get(wh).shape()[0],
        })
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let wi = g.param(self.wi);
        let wh = g.param(self.wh);
        let bi = g.param(self.bi);
        let bh = g.param(self.bh);
        g.gru_cell(x, h, wi, wh, bi, bh)
    }
}

/// Hyperparameters of the single-head encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub causal: bool,
}

/// One encoder block: learned positions, single-head scaled dot-product
/// self-attention and a tanh feed-forward sublayer, each wrapped in a
/// residual connection followed by layer normalization.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub shape: TransformerShape,
    pub pos: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

pub struct TransformerOutput {
    pub hidden: Var,
    pub attention: Var,
}

impl TransformerBlock {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, shape: TransformerShape, rng: &mut R) -> Self {
        let d = shape.d_model;
        let pos = ps.add_glorot(format!("{name}.pos"), shape.max_len, d, rng);
        let wq = ps.add_glorot(format!("{name}.wq"), d, d, rng);
        let wk = ps.add_glorot(format!("{name}.wk"), d, d, rng);
        let wv = ps.add_glorot(format!("{name}.wv"), d, d, rng);
        let wo = ps.add_glorot(format!("{name}.wo"), d, d, rng);
        let ln1_g = ps.add(format!("{name}.ln1.g"), Tensor::vector(vec![1.0; d]));
        let ln1_b = ps.add_zeros(format!("{name}.ln1.b"), &[d]);
        let ff1 = Linear::new(ps, &format!("{name}.ff1"), d, shape.d_ff, true, rng);
        let ff2 = Linear::new(ps, &format!("{name}.ff2"), shape.d_ff, d, true, rng);
        let ln2_g = ps.add(format!("{name}.ln2.g"), Tensor::vector(vec![1.0; d]));
        let ln2_b = ps.add_zeros(format!("{name}.ln2.b"), &[d]);
        Self {
            shape,
            pos,
            wq,
            wk,
            wv,
            wo,
            ln1_g,
            ln1_b,
            ff1,
            ff2,
            ln2_g,
            ln2_b,
        }
    }

    pub fn bind(ps: &ParamStore, name: &str, shape: TransformerShape) -> Result<Self> {
        let l = |s: &str| lookup(ps, &format!("{name}.{s}"));
        Ok(Self {
            shape,
            pos: l("pos")?,
            wq: l("wq")?,
            wk: l("wk")?,
            wv: l("wv")?,
            wo: l("wo")?,
            ln1_g: l("ln1.g")?,
            ln1_b: l("ln1.b")?,
            ff1: Linear::bind(ps, &format!("{name}.ff1"), true)?,
            ff2: Linear::bind(ps, &format!("{name}.ff2"), true)?,
            ln2_g: l("ln2.g")?,
            ln2_b: l("ln2.b")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<TransformerOutput> {
        let t = g.value(x).rows();
        if t > self.shape.max_len {
            return Err(Error::Capacity(format!(
                "sequence of {t} exceeds positional capacity {}",
                self.shape.max_len
            )));
        }
        let pos = g.param(self.pos);
        let p = g.slice_rows(pos, 0, t)?;
        let xp = g.add(x, p)?;

        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let wo = g.param(self.wo);
        let q = g.matmul(xp, wq)?;
        let k = g.matmul(xp, wk)?;
        let v = g.matmul(xp, wv)?;
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.shape.d_model as f64).sqrt());
        let attention = g.row_softmax(scores, self.shape.causal);
        let ctx = g.matmul(attention, v)?;
        let att_out = g.matmul(ctx, wo)?;

        let res1 = g.add(xp, att_out)?;
        let (g1, b1) = (g.param(self.ln1_g), g.param(self.ln1_b));
        let h1 = g.layer_norm(res1, g1, b1)?;

        let f = self.ff1.forward(g, h1)?;
        let f = g.tanh(f);
        let f = self.ff2.forward(g, f)?;
        let res2 = g.add(h1, f)?;
        let (g2, b2) = (g.param(self.ln2_g), g.param(self.ln2_b));
        let hidden = g.layer_norm(res2, g2, b2)?;
        Ok(TransformerOutput { hidden, attention })
    }
}
