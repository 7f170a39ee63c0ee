use crate::error::{AtmError, Result};
use crate::Scalar;

/// Labeled feature vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T: Scalar> {
    dim: usize,
    features: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(dim: usize, features: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(AtmError::config("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(AtmError::Shape {
                expected: dim * labels.len(),
                actual: features.len(),
            });
        }
        Ok(LabeledBatch {
            dim,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        LabeledBatch {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn push(&mut self, row: &[T], label: usize) {
        assert_eq!(row.len(), self.dim, "row width does not match batch");
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// New batch holding the listed rows in the listed order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = LabeledBatch::empty(self.dim);
        out.features.reserve(indices.len() * self.dim);
        out.labels.reserve(indices.len());
        for &i in indices {
            out.push(self.row(i), self.label(i));
        }
        out
    }

    /// Concatenation of several batches with equal width.
    pub fn concat<'a>(dim: usize, parts: impl IntoIterator<Item = &'a LabeledBatch<T>>) -> Result<Self> {
        let mut out = LabeledBatch::empty(dim);
        for part in parts {
            if part.dim != dim {
                return Err(AtmError::Shape {
                    expected: dim,
                    actual: part.dim,
                });
            }
            out.features.extend_from_slice(&part.features);
            out.labels.extend_from_slice(&part.labels);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> LabeledBatch<U> {
        LabeledBatch {
            dim: self.dim,
            features: self
                .features
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            labels: self.labels.clone(),
        }
    }
}

/// A batch or a subset of its rows, without copying.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a, T: Scalar> {
    batch: &'a LabeledBatch<T>,
    rows: Option<&'a [usize]>,
}

impl<'a, T: Scalar> BatchView<'a, T> {
    pub fn subset(batch: &'a LabeledBatch<T>, rows: &'a [usize]) -> Self {
        BatchView {
            batch,
            rows: Some(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.batch.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.batch.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [T], usize)> + '_ {
        let batch = self.batch;
        (0..self.len()).map(move |j| {
            let i = self.rows.map_or(j, |r| r[j]);
            (batch.row(i), batch.label(i))
        })
    }
}

impl<'a, T: Scalar> From<&'a LabeledBatch<T>> for BatchView<'a, T> {
    fn from(batch: &'a LabeledBatch<T>) -> Self {
        BatchView { batch, rows: None }
    }
}
