use std::ops::{Deref, DerefMut};

use crate::error::{AtmError, Result};
use crate::probe;
use crate::Scalar;

/// Flat parameter buffer: the common currency of models and task vectors.
///
/// Each live instance is tracked by [`crate::probe`].
#[derive(Debug, PartialEq)]
pub struct ParamVector<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        probe::acquire();
        ParamVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(mut self) -> Vec<T> {
        std::mem::take(&mut self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        max_abs(&self.values)
    }

    pub fn l2_norm(&self) -> T {
        l2_norm(&self.values)
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(AtmError::Shape {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }
}

impl<T: Scalar> Clone for ParamVector<T> {
    fn clone(&self) -> Self {
        Self::from_vec(self.values.clone())
    }
}

impl<T: Scalar> Drop for ParamVector<T> {
    fn drop(&mut self) {
        probe::release();
    }
}

impl<T: Scalar> Deref for ParamVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.values
    }
}

impl<T: Scalar> DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// Loss gradient with respect to a [`ParamVector`]; same layout.
///
/// Not tracked by the probe: gradients are scratch, not stored state.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T: Scalar> {
    pub values: Vec<T>,
}

impl<T: Scalar> GradientVector<T> {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> T {
        max_abs(&self.values)
    }

    pub fn l2_norm(&self) -> T {
        l2_norm(&self.values)
    }
}

pub fn max_abs<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

pub fn l2_norm<T: Scalar>(xs: &[T]) -> T {
    xs.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// `max_i |a_i - b_i|`.
pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "max_abs_diff on unequal lengths");
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

/// `||a - b||_2 / ||b||_2`, or the absolute norm when `b` is zero.
pub fn relative_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "relative_l2 on unequal lengths");
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt();
    let denom = l2_norm(b);
    if denom > T::zero() {
        diff / denom
    } else {
        diff
    }
}
