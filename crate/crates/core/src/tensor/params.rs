use crate::scalar::Scalar;

use super::numel;

/// A named dense tensor, the unit stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> NamedTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(numel(&shape), data.len(), "tensor data length");
        NamedTensor { name: name.into(), shape, data }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        NamedTensor::new(name, shape, vec![T::zero(); n])
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensor<U> {
        NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(tensors: Vec<NamedTensor<T>>) -> Self {
        ParamSet { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// `(name, shape)` pairs in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.tensors.iter()
    }
}
