//! Named parameter storage and the small layer vocabulary built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

/// Ordered collection of named arrays. Insertion order is the canonical
/// order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if !tensor.all_finite() {
            return Err(Error::Config(format!("parameter {name} is not finite")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every array with the identically named one from `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} arrays, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, tensor) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected array {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "array {name} has shape {}, expected {}",
                    tensor.shape(),
                    self.get(id).shape()
                )));
            }
            if !tensor.all_finite() {
                return Err(Error::Format(format!("array {name} is not finite")));
            }
            *self.get_mut(id) = tensor.clone();
        }
        Ok(())
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Convolution with bias and `same` padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    /// Registers `<name>.weight` (fan-in scaled uniform) and `<name>.bias`
    /// (zeros).
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        let shape = Shape::new(cout, cin, kernel, kernel);
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let w = Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-bound..bound)));
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, cout, 1, 1)),
        )?;
        Ok(Self { weight, bias })
    }

    /// Registers a `1x1` convolution initialised to the identity map.
    pub fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let w = Tensor::from_fn(Shape::new(channels, channels, 1, 1), |o, i, _, _| {
            if o == i {
                T::one()
            } else {
                T::zero()
            }
        });
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, channels, 1, 1)),
        )?;
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn in_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape().c
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape().n
    }

    pub const fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cin * cout * kernel * kernel + cout
    }
}
