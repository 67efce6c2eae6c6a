use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// A named, trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Ordered collection of parameters. Order is part of the model definition:
/// it fixes checkpoint layout and optimizer state alignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter into `graph`, returning one [`Var`] per index.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| graph.param(i, &p.value))
            .collect()
    }

    /// Adds the parameter gradients from a backward pass into each `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in grads.params() {
            let p = &mut self.params[idx];
            match p.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    /// Gives every parameter a zero gradient if it has none, so parameters
    /// not reached by a batch still take a (zero-gradient) optimizer step.
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().find(|p| !p.value.is_finite()) {
            Some(_) => Err(TensorError::NonFinite { op: "parameter" }),
            None => Ok(()),
        }
    }
}
