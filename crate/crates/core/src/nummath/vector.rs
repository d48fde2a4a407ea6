//! Flat parameter vectors.

use std::ops::Index;

use crate::error::{Error, Result};

/// A flat, finite, real-valued vector holding model parameters or any
/// gradient-shaped quantity (momentum, model deltas).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    /// Wraps `values`, rejecting NaN or infinite entries.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(ParamVector(values))
        } else {
            Err(Error::NonFinite {
                op: "ParamVector::from_vec",
            })
        }
    }

    pub(crate) fn from_vec_checked(values: Vec<f64>, op: &'static str) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(ParamVector(values))
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Callers must keep every entry finite.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn norm_sq(&self) -> f64 {
        grad_norm_sq(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            })
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    /// `self + other`.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        ParamVector::from_vec_checked(self.0.iter().map(|v| a * v).collect(), "scale")
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Squared Euclidean norm, `sum_j g_j^2`.
pub fn grad_norm_sq(g: &ParamVector) -> f64 {
    g.0.iter().map(|v| v * v).sum()
}

/// Returns `a * x + y` elementwise.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_dim(y.dim())?;
    let out = x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect();
    ParamVector::from_vec_checked(out, "axpy")
}

/// Arithmetic mean of equally sized vectors, summed in the given order and
/// then scaled by `1/len`.
pub fn mean<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(Error::Empty("mean of no vectors"))?;
    let mut acc = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        v.check_dim(acc.len())?;
        for (a, b) in acc.iter_mut().zip(&v.0) {
            *a += b;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    ParamVector::from_vec_checked(acc, "mean")
}
