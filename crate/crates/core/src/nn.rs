//! Named parameter storage and the small layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer partition a parameter belongs to; each has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AssignmentLogits,
    Base,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> &Tensor<T> {
        let id = self.find(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        self.value(id)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Glorot-uniform weight matrix.
pub fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-limit..limit)))
}

/// Affine map `y = x·W + b` with `W: [in×out]`, `b: [1×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamGroup::Base, glorot(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), ParamGroup::Base, Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; needs at least two entries.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x);
            if i < last {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Zeroes the last layer's weights so the MLP initially outputs its bias.
    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let last = &self.layers[self.layers.len() - 1];
        store.value_mut(last.weight).data_mut().fill(T::zero());
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), ParamGroup::Base, Tensor::full(1, dim, T::one())),
            bias: store.add(format!("{name}.bias"), ParamGroup::Base, Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::lit(Self::EPS))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
