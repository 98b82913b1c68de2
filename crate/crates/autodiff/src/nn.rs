//! Parameter storage and the two layer types the models need: tanh MLPs and a
//! gated recurrent cell.

use rand::Rng;

use crate::array::Array;
use crate::dual::Dual;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array) {
        debug_assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }
}

/// Lifts bound parameters into forward mode as constants along the direction.
pub fn lift_dual<T: Tensor>(bound: &[T]) -> Vec<Dual<T>> {
    bound.iter().cloned().map(Dual::constant_of).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        let b = Array::from_fn(1, fan_out, |_, _| rng.random_range(-bound..bound));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Tensor>(&self, p: &[T], x: &T) -> Result<T> {
        x.matmul(&p[self.weight.0])?.add(&p[self.bias.0])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.set(self.weight, Array::zeros(self.fan_in, self.fan_out));
        store.set(self.bias, Array::zeros(1, self.fan_out));
    }
}

/// Fully connected network with tanh hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<T: Tensor>(&self, p: &[T], x: &T) -> Result<T> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        self.layers[self.layers.len() - 1].zero(store);
    }
}

/// Gated recurrent cell (reset/update/candidate gates).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * hidden, rng),
            recurrent: Linear::new(store, &format!("{name}.recurrent"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input.fan_in
    }

    /// One update `h' = n + u * (h - n)`.
    pub fn step<T: Tensor>(&self, p: &[T], x: &T, h: &T) -> Result<T> {
        let n = self.hidden;
        let gi = self.input.forward(p, x)?;
        let gh = self.recurrent.forward(p, h)?;
        let reset = gi.slice_cols(0, n)?.add(&gh.slice_cols(0, n)?)?.sigmoid();
        let update = gi.slice_cols(n, n)?.add(&gh.slice_cols(n, n)?)?.sigmoid();
        let cand = gi
            .slice_cols(2 * n, n)?
            .add(&reset.mul(&gh.slice_cols(2 * n, n)?)?)?
            .tanh();
        cand.add(&update.mul(&h.sub(&cand)?)?)
    }
}
