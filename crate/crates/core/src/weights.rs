//! Named parameter registry shared by the model, the optimizer and checkpoints.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Ordered collection of named learnable tensors.
///
/// Iteration order is insertion order, which is what checkpoints and the
/// optimizer state are aligned to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelWeights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate weight name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.values_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `template`, in order.
    pub fn check_layout(&self, template: &ModelWeights<T>) -> Result<()> {
        if self.len() != template.len() {
            return Err(Error::Data(format!(
                "weight count {} does not match model layout ({})",
                self.len(),
                template.len()
            )));
        }
        for ((name, t), (tname, tt)) in self.iter().zip(template.iter()) {
            if name != tname {
                return Err(Error::Data(format!("weight {name:?} where {tname:?} was expected")));
            }
            if t.shape() != tt.shape() {
                return Err(Error::shape("weight layout", t.shape(), tt.shape()));
            }
        }
        Ok(())
    }

    /// Places every tensor into `graph`, tracked for gradients when `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Names externally created handles (one per tensor, in registry order).
    pub fn bindings_for(&self, vars: &[Var]) -> Result<Bindings> {
        if vars.len() != self.tensors.len() {
            return Err(Error::shape("bindings_for", &[vars.len()], &[self.tensors.len()]));
        }
        let vars = self.tensors.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(Bindings { vars })
    }

    /// Gradients of every weight after a backward pass, in registry order.
    /// Weights that received no gradient yield zeros.
    pub fn collect_grads(&self, graph: &Graph<T>, bindings: &Bindings) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                bindings
                    .vars
                    .get(name)
                    .and_then(|&v| graph.grad(v))
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect()
    }
}

/// Graph handles of a bound [`ModelWeights`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing weight {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.values().copied()
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}
