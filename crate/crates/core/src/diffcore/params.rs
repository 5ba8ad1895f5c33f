use rand::Rng;

use super::{Activation, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "parameter shape is fixed");
        self.values[id.0] = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape handles for a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` initialization.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add(format!("{name}.w"), init_uniform(rng, &[fan_in, fan_out], fan_in));
        let b = params.add(format!("{name}.b"), init_uniform(rng, &[1, fan_out], fan_in));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(h, bound.var(self.b))
    }
}

/// Stack of dense layers with an activation between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, widths: &[usize], activation: Activation) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i + 1 < self.layers.len() {
                h = tape.activate(h, self.activation);
            }
        }
        Ok(h)
    }
}
