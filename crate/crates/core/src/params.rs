//! Named parameter storage shared by blocks, models, checkpoints and the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal kernel initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Whether AdamW weight decay applies.
    pub decay: bool,
}

/// Ordered, uniquely named parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on `g` as a leaf; the result is indexed by [`ParamId`].
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.tensor.cast())).collect()
    }

    /// Replaces the tensor of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[i];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}`: shape {:?} does not match {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Sets every parameter to zero, including gains, `tau` and `beta`.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.tensor.data_mut().fill(0.0);
        }
    }
}

/// Normal(0, std²) samples redrawn until they fall within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = (z * std) as f32;
    }
    t
}
