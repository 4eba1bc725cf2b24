use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named tensors holding learned weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if !tensor.is_finite() {
            return Err(Error::Domain(format!("parameter `{name}` is not finite")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get_index(&self, index: usize) -> Option<(&str, &Tensor<T>)> {
        self.tensors
            .get_index(index)
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Gradient of a scalar loss with respect to every tensor of a
/// [`ParameterStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_for(store: &ParameterStore<T>) -> Self {
        Gradients {
            tensors: store.zeros_like().tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub(crate) fn get_index_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Global L2 norm over every component, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }

    /// Elementwise sum with another gradient set over the same store.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract("gradient sets differ in size".into()));
        }
        for ((ka, a), (kb, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            if ka != kb || a.shape() != b.shape() {
                return Err(Error::dim("accumulate", a.shape(), b.shape()));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
        Ok(())
    }
}
