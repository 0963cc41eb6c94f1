use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adagrad denominator offset.
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus their Adagrad squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    accum: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            accum: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.accum.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        id
    }

    /// Glorot-uniform weight matrix `fan_in x fan_out`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn accumulator(&self, id: ParamId) -> &Tensor {
        &self.accum[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All parameter values concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value (and resets the accumulator) of an existing parameter.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(
                "param-set",
                format!(
                    "{name}: expected {:?}, got {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        self.accum[id.0] = Tensor::zeros(self.values[id.0].shape());
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One Adagrad descent step: `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`.
    pub fn adagrad_step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        self.check_grads(grads)?;
        for ((p, a), g) in self.values.iter_mut().zip(&mut self.accum).zip(&grads.tensors) {
            for ((pv, av), gv) in p.data_mut().iter_mut().zip(a.data_mut()).zip(g.data()) {
                *av += gv * gv;
                *pv -= lr * gv / (av.sqrt() + ADAGRAD_EPS);
            }
        }
        Ok(())
    }

    /// Plain gradient descent: `p -= lr * g`.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        self.check_grads(grads)?;
        for (p, g) in self.values.iter_mut().zip(&grads.tensors) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    fn check_grads(&self, grads: &Grads) -> Result<()> {
        if grads.tensors.len() != self.values.len() {
            return Err(Error::dim(
                "optimizer",
                format!("{} gradients for {} parameters", grads.tensors.len(), self.values.len()),
            ));
        }
        for (i, (p, g)) in self.values.iter().zip(&grads.tensors).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("{}: param {:?} vs grad {:?}", self.names[i], p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter {}",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}
