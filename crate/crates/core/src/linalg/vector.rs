use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::{LinalgError, Result};
use crate::Scalar;

/// Finite, non-empty dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<S>", into = "Vec<S>")]
#[serde(bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct Vector<S: Scalar>(Vec<S>);

impl<S: Scalar> Vector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(LinalgError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFiniteInput);
        }
        Ok(Self(values))
    }

    /// # Panics
    /// If `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self(vec![S::zero(); dim])
    }

    /// Unit basis vector `e_index`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[index] = S::one();
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<S> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.0.iter()
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_dim(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> S {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn norm_inf(&self) -> S {
        self.0.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == S::zero())
    }

    pub fn scaled(&self, factor: S) -> Self {
        Self(self.0.iter().map(|v| *v * factor).collect())
    }

    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|v| -*v).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| *a + *b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| *a - *b).collect()))
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: S, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * *b;
        }
        Ok(())
    }

    /// Unit vector in the same direction.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == S::zero() {
            return Err(LinalgError::ZeroVector);
        }
        Ok(self.scaled(S::one() / n))
    }

    /// Precision conversion (e.g. `f32` activations promoted to `f64`).
    pub fn cast<T: Scalar>(&self) -> Vector<T> {
        Vector(self.0.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect())
    }
}

impl<S: Scalar> Index<usize> for Vector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.0[i]
    }
}

impl<S: Scalar> TryFrom<Vec<S>> for Vector<S> {
    type Error = LinalgError;
    fn try_from(values: Vec<S>) -> Result<Self> {
        Self::new(values)
    }
}

impl<S: Scalar> From<Vector<S>> for Vec<S> {
    fn from(v: Vector<S>) -> Vec<S> {
        v.0
    }
}

/// Plain left-to-right dot product. No fused multiply-add, so results are
/// reproducible and exactly sign-symmetric.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}
