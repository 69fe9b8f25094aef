//! Flat parameter vectors.
//!
//! Every model state, momentum buffer and gradient in the simulator is a
//! [`ParamVec`]. Arithmetic is elementwise and in index order so results are
//! bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    pub fn zeros(dim: usize) -> Self {
        ParamVec(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVec(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVec) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }

    /// `self -= a * other`
    pub fn sub_scaled(&mut self, a: f64, other: &ParamVec) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s -= a * o;
        }
    }

    /// `self = decay * self + other`, the Polyak buffer update.
    pub fn decay_add(&mut self, decay: f64, other: &ParamVec) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s = decay * *s + o;
        }
    }

    pub fn add_assign(&mut self, other: &ParamVec) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|v| a * v).collect())
    }

    pub fn sub(&self, other: &ParamVec) -> ParamVec {
        debug_assert_eq!(self.len(), other.len());
        ParamVec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamVec) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn ensure_len(&self, dim: usize) -> Result<()> {
        if self.len() == dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.len(),
            })
        }
    }

    /// Left-to-right sum divided by the count. Panics on an empty slice.
    pub fn mean(vectors: &[ParamVec]) -> ParamVec {
        let mut acc = ParamVec::zeros(vectors[0].len());
        for v in vectors {
            acc.add_assign(v);
        }
        acc.scale(1.0 / vectors.len() as f64);
        acc
    }

    pub fn sum<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a ParamVec>) -> ParamVec {
        let mut acc = ParamVec::zeros(dim);
        for v in vectors {
            acc.add_assign(v);
        }
        acc
    }
}

impl From<Vec<f64>> for ParamVec {
    fn from(values: Vec<f64>) -> Self {
        ParamVec(values)
    }
}

impl std::ops::Index<usize> for ParamVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVec {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}
