use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Which side of the shared/private partition a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    Shared,
    Private(String),
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Shared => write!(f, "shared"),
            Tag::Private(city) => write!(f, "private:{city}"),
        }
    }
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        if s == "shared" {
            Some(Tag::Shared)
        } else {
            s.strip_prefix("private:").filter(|c| !c.is_empty()).map(|c| Tag::Private(c.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub tag: Tag,
    /// Frozen parameters are stored and loaded but never updated.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, tag: Tag) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad, tag, trainable: true }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<usize> {
        if self.index.contains_key(&p.name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{}`", p.name)));
        }
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Subset whose tags satisfy `keep`, cloned.
    pub fn filter(&self, keep: impl Fn(&Parameter) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            out.insert(p.clone()).expect("names already unique");
        }
        out
    }

    /// Union of two disjoint sets, in `self` then `other` order.
    pub fn union(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for p in other.iter() {
            out.insert(p.clone())?;
        }
        Ok(out)
    }

    /// Copies values (not gradients) of same-named parameters from `src`.
    pub fn copy_values_from(&mut self, src: &ParamSet) -> Result<()> {
        for p in src.iter() {
            let dst = self
                .get_mut(&p.name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{}`", p.name)))?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::InvalidShape(format!("shape mismatch for `{}`", p.name)));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Checks that every gradient is finite, naming the first offender.
    pub fn check_finite_grads(&self) -> Result<()> {
        for p in &self.params {
            if !p.grad.all_finite() {
                return Err(Error::NumericFailure(format!("gradient of `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Uniform Glorot initialization, quantized to 32-bit, from a substream keyed
/// by parameter name.
pub fn glorot(seed: u64, name: &str, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = substream(seed, &format!("init/{name}"), 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
