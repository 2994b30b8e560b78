//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    /// Final projection of a residual branch. Zeroing every such parameter
    /// turns each residual block into the identity map.
    pub output_projection: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

pub fn valid_param_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<f32>, output_projection: bool) -> Result<ParamId> {
        if !valid_param_name(name) {
            return Err(Error::invalid("param", format!("name {:?} must match [a-z0-9_.]+", name)));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid("param", format!("duplicate parameter name {:?}", name)));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Parameter { name: name.to_string(), tensor, output_projection });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_output_projections(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.output_projection) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Hierarchical parameter builder: `scope("dec2").scope("mod1")` registers
/// names like `dec2.mod1.sgsa.q.w`.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    output_projection: bool,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit { store, rng, prefix: String::new(), output_projection: false }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamInit<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamInit { store: self.store, rng: self.rng, prefix, output_projection: self.output_projection }
    }

    /// Parameters registered through the returned scope are tagged as
    /// residual output projections.
    pub fn output_projection(&mut self) -> ParamInit<'_> {
        ParamInit { store: self.store, rng: self.rng, prefix: self.prefix.clone(), output_projection: true }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<f32>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.register(&full, tensor, self.output_projection)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.register(name, Tensor::full(shape.to_vec(), value))
    }
}
