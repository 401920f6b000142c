//! Named parameter storage and its binding onto a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
pub type ParamId = usize;

/// An ordered collection of named parameter tensors.
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
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<(), String> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let id = self
                .id_of(name)
                .ok_or_else(|| format!("unexpected parameter {name}"))?;
            if self.values[id].shape() != t.shape() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.values[id].shape(),
                    t.shape()
                ));
            }
            self.values[id] = t.clone();
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(format!("missing parameter {}", self.names[missing]));
        }
        Ok(())
    }

    /// Places every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one [`ParamSet`] placed on a graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a graph, in parameter-id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    /// Gradients for every parameter, zero where none reached it.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&g.shape(v)))
            })
            .collect()
    }
}

/// Helper that registers freshly initialised parameters under a name prefix.
pub struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(set: &'a mut ParamSet, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            set,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder for a nested scope `prefix.name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            set: self.set,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.set.add(n, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }
}
