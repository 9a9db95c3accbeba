use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named tensor plus its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub(crate) first_moment: Tensor<T>,
    pub(crate) second_moment: Tensor<T>,
    pub(crate) step: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            step: 0,
        }
    }

    pub fn first_moment(&self) -> &Tensor<T> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor<T> {
        &self.second_moment
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn reset_moments(&mut self) {
        let (r, c) = self.value.shape();
        self.first_moment = Tensor::zeros(r, c);
        self.second_moment = Tensor::zeros(r, c);
        self.step = 0;
    }
}

/// Named parameters of one learned component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    /// Replaces a tensor's value, keeping its shape. Moments are untouched.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    pub fn reset_moments(&mut self) {
        for p in self.params.values_mut() {
            p.reset_moments();
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    /// Zero gradients for every tensor of `params`.
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let mut g = Self::new();
        for (name, t) in params.iter() {
            g.insert(name, Tensor::zeros(t.rows(), t.cols()));
        }
        g
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulates `other` into `self`, adding missing entries.
    pub fn accumulate(&mut self, other: &GradStore<T>) {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(existing) => existing.add_assign(g),
                None => {
                    self.grads.insert(name.to_string(), g.clone());
                }
            }
        }
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm_f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm_f64().sqrt()
    }

    pub fn scale_in_place(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}
