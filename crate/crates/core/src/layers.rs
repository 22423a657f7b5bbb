//! Convolution layers and the named parameter registry they live in.

use std::ops::Index;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Position of a tensor inside a [`ParamRegistry`].
pub type ParamId = usize;

/// Ordered map from hierarchical name (`fwd_cell.input_gate.kernel`) to tensor.
///
/// Iteration order is insertion order, so it is identical across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRegistry<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{}`", name)));
        }
        let (id, _) = self.params.insert_full(name, value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name)
    }

    pub fn by_id(&self, id: ParamId) -> (&str, &Tensor<T>) {
        let (name, t) = self.params.get_index(id).expect("parameter id from this registry");
        (name.as_str(), t)
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.params
            .get_index_mut(id)
            .expect("parameter id from this registry")
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Replace a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar parameters whose names start with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.params.values().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Record every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.params.values().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Tape handles for a registry, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id]
    }
}

/// Total scalar parameter count of a registry.
pub fn param_count<T: Element>(registry: &ParamRegistry<T>) -> usize {
    registry.param_count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Sigmoid,
    Tanh,
    Swish,
}

impl Activation {
    pub fn apply<T: Element>(self, tape: &Tape<T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Swish => tape.swish(x),
        }
    }
}

/// Fan-balanced uniform kernel and zero bias for a `k x k` convolution.
///
/// Weights are drawn from `U(-limit, limit)` with
/// `limit = sqrt(6 / (in_ch * k^2 + out_ch * k^2))`.
pub fn init_conv<T: Element>(out_ch: usize, in_ch: usize, k: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let limit = glorot_limit(out_ch, in_ch, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = Tensor::from_fn([out_ch, in_ch, k, k], |_| {
        T::from_f64_lossy(rng.random_range(-limit..=limit))
    });
    (kernel, Tensor::zeros([out_ch]))
}

pub fn glorot_limit(out_ch: usize, in_ch: usize, k: usize) -> f64 {
    let fan_in = (in_ch * k * k) as f64;
    let fan_out = (out_ch * k * k) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// A same-padded convolution followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
    pub activation: Activation,
}

/// Construction arguments for [`ConvLayer::register`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, activation: Activation) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            k: 3,
            dilation: 1,
            activation,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }
}

impl ConvLayer {
    /// Initialize a layer and add `<name>.kernel` / `<name>.bias` to the registry.
    pub fn register<T: Element>(
        registry: &mut ParamRegistry<T>,
        name: &str,
        spec: ConvSpec,
        seed: u64,
    ) -> Result<Self> {
        if spec.in_ch == 0 || spec.out_ch == 0 || spec.k == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv layer `{}` needs positive extents",
                name
            )));
        }
        let (kernel, bias) = init_conv(spec.out_ch, spec.in_ch, spec.k, seed);
        Ok(ConvLayer {
            kernel: registry.insert(format!("{}.kernel", name), kernel)?,
            bias: registry.insert(format!("{}.bias", name), bias)?,
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            k: spec.k,
            dilation: spec.dilation,
            activation: spec.activation,
        })
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, params[self.kernel], params[self.bias], self.dilation)?;
        Ok(self.activation.apply(tape, y))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k + self.out_ch
    }
}
