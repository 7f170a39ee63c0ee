//! Forward pass, mean cross-entropy and its exact gradient.

use super::arch::{Activation, ArchSpec};
use super::batch::BatchView;
use super::model::ModelState;
use super::params::GradientVector;
use crate::error::{AtmError, Result};
use crate::Scalar;

fn check_batch<T: Scalar>(arch: &ArchSpec, data: &BatchView<'_, T>) -> Result<()> {
    if data.is_empty() {
        return Err(AtmError::Empty("batch"));
    }
    if data.dim() != arch.input_dim() {
        return Err(AtmError::Shape {
            expected: arch.input_dim(),
            actual: data.dim(),
        });
    }
    let classes = arch.class_count();
    if let Some((_, label)) = data.iter().find(|&(_, y)| y >= classes) {
        return Err(AtmError::Label { label, classes });
    }
    Ok(())
}

/// Per-layer activations for one example. `acts[0]` is the input and
/// `acts[L]` the logits.
struct Forward<T> {
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> Forward<T> {
    fn new(arch: &ArchSpec) -> Self {
        Forward {
            acts: arch.layer_widths.iter().map(|&w| vec![T::zero(); w]).collect(),
        }
    }

    fn run(&mut self, arch: &ArchSpec, params: &[T], x: &[T]) {
        self.acts[0].copy_from_slice(x);
        let layers = arch.layers();
        let last = layers.len() - 1;
        for (l, slot) in layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            let weights = &params[slot.offset..slot.bias_offset()];
            let biases = &params[slot.bias_offset()..slot.range().end];
            for (j, out) in output.iter_mut().enumerate() {
                let row = &weights[j * slot.fan_in..(j + 1) * slot.fan_in];
                let z = row.iter().zip(input).fold(biases[j], |acc, (&w, &a)| acc + w * a);
                *out = if l == last {
                    z
                } else {
                    match arch.activation {
                        Activation::Relu => z.max(T::zero()),
                        Activation::Tanh => z.tanh(),
                    }
                };
            }
        }
    }

    fn logits(&self) -> &[T] {
        self.acts.last().expect("at least one layer")
    }
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Mean cross-entropy at an explicit parameter point.
pub fn loss_at<T: Scalar>(arch: &ArchSpec, params: &[T], data: BatchView<'_, T>) -> Result<T> {
    check_batch(arch, &data)?;
    if params.len() != arch.param_count() {
        return Err(AtmError::Shape {
            expected: arch.param_count(),
            actual: params.len(),
        });
    }
    let mut fwd = Forward::new(arch);
    let mut total = T::zero();
    for (x, y) in data.iter() {
        fwd.run(arch, params, x);
        let z = fwd.logits();
        total += log_sum_exp(z) - z[y];
    }
    Ok(total / T::from_usize_lossy(data.len()))
}

/// Mean cross-entropy of `model` on `data`.
pub fn loss<'a, T: Scalar>(model: &ModelState<T>, data: impl Into<BatchView<'a, T>>) -> Result<T> {
    loss_at(model.arch(), model.params(), data.into())
}

/// Exact gradient of [`loss`] by reverse-mode accumulation.
pub fn gradient<'a, T: Scalar>(
    model: &ModelState<T>,
    data: impl Into<BatchView<'a, T>>,
) -> Result<GradientVector<T>> {
    loss_and_gradient(model, data).map(|(_, g)| g)
}

pub fn loss_and_gradient<'a, T: Scalar>(
    model: &ModelState<T>,
    data: impl Into<BatchView<'a, T>>,
) -> Result<(T, GradientVector<T>)> {
    let data = data.into();
    let arch = model.arch();
    check_batch(arch, &data)?;
    let params = model.params().as_slice();
    let layers = arch.layers();
    let inv_n = T::one() / T::from_usize_lossy(data.len());

    let mut fwd = Forward::new(arch);
    let mut grad = GradientVector::zeros(params.len());
    let mut deltas: Vec<Vec<T>> = arch.layer_widths.iter().map(|&w| vec![T::zero(); w]).collect();
    let mut total = T::zero();

    for (x, y) in data.iter() {
        fwd.run(arch, params, x);
        let logits = fwd.logits();
        let lse = log_sum_exp(logits);
        total += lse - logits[y];

        let top = deltas.last_mut().expect("at least one layer");
        for (j, d) in top.iter_mut().enumerate() {
            let p = (logits[j] - lse).exp();
            let target = if j == y { T::one() } else { T::zero() };
            *d = (p - target) * inv_n;
        }

        for (l, slot) in layers.iter().enumerate().rev() {
            let (lower, upper) = deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            let input = &fwd.acts[l];
            let g = &mut grad.values;
            for (j, &dj) in delta.iter().enumerate() {
                let row = slot.offset + j * slot.fan_in;
                for (gw, &a) in g[row..row + slot.fan_in].iter_mut().zip(input) {
                    *gw += dj * a;
                }
                g[slot.bias_offset() + j] += dj;
            }
            if l == 0 {
                continue;
            }
            let below = &mut lower[l];
            let weights = &params[slot.offset..slot.bias_offset()];
            for (i, b) in below.iter_mut().enumerate() {
                let back = delta
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (j, &dj)| acc + weights[j * slot.fan_in + i] * dj);
                let a = input[i];
                let slope = match arch.activation {
                    Activation::Relu => {
                        if a > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                    Activation::Tanh => T::one() - a * a,
                };
                *b = back * slope;
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn predict<T: Scalar>(model: &ModelState<T>, x: &[T]) -> usize {
    let mut fwd = Forward::new(model.arch());
    fwd.run(model.arch(), model.params(), x);
    argmax(fwd.logits())
}

fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_accuracy<'a, T: Scalar>(
    model: &ModelState<T>,
    data: impl Into<BatchView<'a, T>>,
) -> Result<f64> {
    let data = data.into();
    let arch = model.arch();
    check_batch(arch, &data)?;
    let mut fwd = Forward::new(arch);
    let correct = data
        .iter()
        .filter(|&(x, y)| {
            fwd.run(arch, model.params(), x);
            argmax(fwd.logits()) == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
