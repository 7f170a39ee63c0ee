//! Executable checks that task vectors are scaled negative gradients.
//!
//! After one full-batch gradient-descent epoch at rate `eta` the task
//! vector is exactly `-eta * grad L(base)`, and the mean of such task
//! vectors is `-eta` times the mean task gradient. The checks below measure
//! how closely an implementation meets those identities, and how far
//! mini-batch or multi-epoch finetuning drifts from them.

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::numeric::{
    finetune, gradient, loss_at, l2_norm, BatchSize, BatchView, GradientVector, LabeledBatch, ModelState,
    TrainConfig,
};
use crate::synth::TaskSuite;
use crate::task_vector::{aggregate_mean, compute_task_vector};
use crate::Scalar;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const EXACT_TOLERANCE: f64 = 1e-12;

/// How the task vector under test is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    #[serde(rename = "full_batch_1epoch")]
    FullBatch1Epoch,
    Minibatch { batch_size: usize, seed: u64 },
    MultiEpoch { epochs: usize },
}

impl Regime {
    fn name(&self) -> &'static str {
        match self {
            Regime::FullBatch1Epoch => "full_batch_1epoch",
            Regime::Minibatch { .. } => "minibatch",
            Regime::MultiEpoch { .. } => "multi_epoch",
        }
    }

    fn train_config(&self, eta: f64) -> TrainConfig {
        let exact = TrainConfig::one_full_batch_step(eta);
        match *self {
            Regime::FullBatch1Epoch => exact,
            Regime::Minibatch { batch_size, seed } => TrainConfig {
                batch_size: BatchSize::Mini(batch_size),
                seed,
                shuffle: true,
                ..exact
            },
            Regime::MultiEpoch { epochs } => TrainConfig { epochs, ..exact },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_norm_residual: f64,
    pub relative_residual: f64,
    pub regime: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    fn compare<T: Scalar>(tau: &[T], scaled_grad: &[T], regime: &str, tolerance: f64) -> Self {
        // residual = tau - (-eta g) = tau + eta g
        let residual: Vec<T> = tau.iter().zip(scaled_grad).map(|(&t, &g)| t + g).collect();
        let max_norm = crate::numeric::max_abs(&residual).to_f64_lossy();
        let denom = l2_norm(scaled_grad).to_f64_lossy();
        let abs = l2_norm(&residual).to_f64_lossy();
        let relative = if denom > 0.0 { abs / denom } else { abs };
        EquivalenceReport {
            max_norm_residual: max_norm,
            relative_residual: relative,
            regime: regime.to_string(),
            tolerance,
            passed: max_norm <= tolerance,
        }
    }
}

/// Central differences of an arbitrary scalar function.
pub fn finite_diff_gradient_of<T: Scalar>(
    f: impl Fn(&[T]) -> Result<T>,
    point: &[T],
    h: f64,
) -> Result<GradientVector<T>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(AtmError::config(format!("finite-difference step must be positive, got {h}")));
    }
    let step = T::from_f64_lossy(h);
    let two_h = step + step;
    let mut probe = point.to_vec();
    let mut out = GradientVector::zeros(point.len());
    for (i, slot) in out.values.iter_mut().enumerate() {
        let original = probe[i];
        probe[i] = original + step;
        let plus = f(&probe)?;
        probe[i] = original - step;
        let minus = f(&probe)?;
        probe[i] = original;
        *slot = (plus - minus) / two_h;
    }
    Ok(out)
}

/// Central-difference estimate of the loss gradient, using forward passes
/// only.
pub fn finite_diff_gradient<T: Scalar>(model: &ModelState<T>, data: &LabeledBatch<T>, h: f64) -> Result<GradientVector<T>> {
    let arch = model.arch();
    finite_diff_gradient_of(|p| loss_at(arch, p, BatchView::from(data)), model.params(), h)
}

fn scaled_negative<T: Scalar>(g: &GradientVector<T>, eta: f64) -> Vec<T> {
    let eta = T::from_f64_lossy(eta);
    g.values.iter().map(|&v| eta * v).collect()
}

/// Finetunes `base` on `train` under `regime` and compares the resulting
/// task vector with `-eta * gradient(base, train)`.
pub fn check_task_vector_is_scaled_gradient<T: Scalar>(
    base: &ModelState<T>,
    train: &LabeledBatch<T>,
    eta: f64,
    regime: &Regime,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    let tuned = finetune(base.clone(), train, &regime.train_config(eta))?;
    let tau = compute_task_vector(tuned, base, "task", 0)?;
    let g = gradient(base, train)?;
    Ok(EquivalenceReport::compare(
        &tau.delta,
        &scaled_negative(&g, eta),
        regime.name(),
        tolerance,
    ))
}

/// Compares the mean of one-step full-batch task vectors over the suite's
/// train splits with `-eta` times the mean task gradient.
pub fn check_multitask_vector_is_average_gradient<T: Scalar>(
    base: &ModelState<T>,
    suite: &TaskSuite<T>,
    eta: f64,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    if suite.is_empty() {
        return Err(AtmError::Empty("task suite"));
    }
    let cfg = TrainConfig::one_full_batch_step(eta);
    let mut vectors = Vec::with_capacity(suite.len());
    let mut grad_sum = vec![T::zero(); base.params().len()];
    for task in &suite.tasks {
        let train = task.train();
        let tuned = finetune(base.clone(), train, &cfg)?;
        vectors.push(compute_task_vector(tuned, base, task.task_id.clone(), 0)?);
        let g = gradient(base, train)?;
        grad_sum.iter_mut().zip(&g.values).for_each(|(s, &v)| *s += v);
    }
    let n = T::from_usize_lossy(suite.len());
    let mean_grad = GradientVector {
        values: grad_sum.into_iter().map(|s| s / n).collect(),
    };
    let mtv = aggregate_mean(vectors)?;
    Ok(EquivalenceReport::compare(
        &mtv.delta,
        &scaled_negative(&mean_grad, eta),
        "full_batch_1epoch",
        tolerance,
    ))
}
