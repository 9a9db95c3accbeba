use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An `horizon x action_dim` action sequence, stored row-major (one row per step).
#[derive(Clone, Debug, PartialEq)]
pub struct Plan<T> {
    horizon: usize,
    action_dim: usize,
    actions: Vec<T>,
}

impl<T: Scalar> Plan<T> {
    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            action_dim,
            actions: vec![T::zero(); horizon * action_dim],
        }
    }

    pub fn from_flat(horizon: usize, action_dim: usize, actions: Vec<T>) -> Result<Self> {
        if actions.len() != horizon * action_dim {
            return Err(Error::dim("plan", horizon * action_dim, actions.len()));
        }
        Ok(Self {
            horizon,
            action_dim,
            actions,
        })
    }

    pub fn from_steps(steps: &[Vec<T>]) -> Result<Self> {
        let action_dim = steps.first().map_or(0, Vec::len);
        let mut actions = Vec::with_capacity(steps.len() * action_dim);
        for (i, s) in steps.iter().enumerate() {
            if s.len() != action_dim {
                return Err(Error::dim(format!("plan step {i}"), action_dim, s.len()));
            }
            actions.extend_from_slice(s);
        }
        Ok(Self {
            horizon: steps.len(),
            action_dim,
            actions,
        })
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    #[inline]
    pub fn step(&self, i: usize) -> &[T] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn step_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn first(&self) -> &[T] {
        self.step(0)
    }

    pub fn as_flat(&self) -> &[T] {
        &self.actions
    }

    /// Clamps every coordinate into `[-1, 1]`.
    pub fn clamp_to_bounds(&mut self) {
        for a in &mut self.actions {
            *a = a.max(-T::one()).min(T::one());
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.actions
            .iter()
            .all(|a| a.is_finite() && *a >= -T::one() && *a <= T::one())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.horizon, self.action_dim, self.actions.clone())
    }
}
