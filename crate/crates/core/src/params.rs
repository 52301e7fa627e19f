//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, RngStream};
use crate::tensor::Tensor;

/// Standard deviation of normally initialised weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Declared shape and initialiser of one named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Materialises the tensor. Each parameter draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing other parameters never
    /// changes its initial value.
    pub fn materialize(&self, seed: u64) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::Normal => {
                let mut rng = RngStream::new(derive_seed_str(seed, &self.name));
                Tensor::from_fn(self.shape.clone(), |_| INIT_STD * rng.normal())
            }
        }
    }
}

/// Specs for a `[d_in, d_out]` weight and optional `[d_out]` bias.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.w"),
        [d_in, d_out],
        Init::Normal,
    )];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.b"), [d_out], Init::Zeros));
    }
    v
}

pub fn norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), [d], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), [d], Init::Zeros),
    ]
}

/// Ordered name → tensor map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut s = Self::new();
        for spec in specs {
            s.insert(spec.name.clone(), spec.materialize(seed));
        }
        s
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Param(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("no parameter named {name:?}")))
    }

    /// Replaces a tensor's contents; the new value must keep its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
            ));
        }
        *slot = t;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on the tape as a named grad-enabled leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect();
        Bound { vars }
    }

    /// Places every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param(format!("no parameter named {name:?}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let a = ParamSpec::new("x.w", [3, 4], Init::Normal).materialize(1);
        let b = ParamSpec::new("x.w", [3, 4], Init::Normal).materialize(1);
        let c = ParamSpec::new("y.w", [3, 4], Init::Normal).materialize(1);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros([2]));
        assert!(s.set("a", Tensor::zeros([3])).is_err());
        assert!(s.set("missing", Tensor::zeros([2])).is_err());
        s.set("a", Tensor::ones([2])).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
    }
}
