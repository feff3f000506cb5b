//! Named parameter collections and their binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// How a parameter is filled at initialization.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Values(Vec<f64>),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
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

    /// Prepend `prefix.` to the name.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        match &self.init {
            Init::Zeros => Ok(Tensor::zeros(self.shape.clone())),
            Init::Ones => Ok(Tensor::ones(self.shape.clone())),
            Init::Normal(std) => Ok(Tensor::randn(self.shape.clone(), *std, rng)),
            Init::Values(v) => Tensor::new(self.shape.clone(), v.clone()),
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialize `specs` in order, drawing from one rng stream.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            if store.get(&spec.name).is_some() {
                return Err(Error::Config(format!(
                    "duplicate parameter `{}`",
                    spec.name
                )));
            }
            store.insert(spec.name.clone(), spec.materialize(rng)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Register every tensor as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Register every tensor as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let found = other
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Parameter names resolved to tape variables.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pair `names` with already-registered variables.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Bound {
            vars: names
                .into_iter()
                .map(String::from)
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients keyed by parameter name; unreached parameters get zeros.
    pub fn collect_grads(&self, tape: &Tape, mut grads: Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            out.insert(name.clone(), g);
        }
        out
    }
}
