//! Task vectors: parameter deltas between a finetuned model and its base.

use crate::error::{AtmError, Result};
use crate::numeric::{ArchSpec, ModelState, ParamVector};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T: Scalar> {
    pub delta: ParamVector<T>,
    pub task_id: String,
    pub iteration: usize,
    pub source_arch: ArchSpec,
}

impl<T: Scalar> TaskVector<T> {
    pub fn new(
        source_arch: ArchSpec,
        delta: ParamVector<T>,
        task_id: impl Into<String>,
        iteration: usize,
    ) -> Result<Self> {
        delta.check_len(source_arch.param_count())?;
        Ok(TaskVector {
            delta,
            task_id: task_id.into(),
            iteration,
            source_arch,
        })
    }
}

/// Aggregate of several task vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskVector<T: Scalar> {
    pub delta: ParamVector<T>,
    pub contributing_tasks: Vec<String>,
    pub aggregator_name: String,
    pub arch: ArchSpec,
}

/// `finetuned - base`. The finetuned model's buffer is reused for the delta.
pub fn compute_task_vector<T: Scalar>(
    finetuned: ModelState<T>,
    base: &ModelState<T>,
    task_id: impl Into<String>,
    iteration: usize,
) -> Result<TaskVector<T>> {
    finetuned.ensure_same_arch(base.arch())?;
    let (arch, mut delta, _) = finetuned.into_parts();
    for (d, &b) in delta.iter_mut().zip(base.params().iter()) {
        *d -= b;
    }
    TaskVector::new(arch, delta, task_id, iteration)
}

/// Checks shared by every aggregator and sorts the vectors into the fixed
/// reduction order (ascending `task_id`, stable).
pub(crate) fn prepare<T: Scalar>(vectors: &mut [TaskVector<T>]) -> Result<()> {
    let first = vectors.first().ok_or(AtmError::Empty("task vector list"))?;
    let (arch, iteration) = (first.source_arch.clone(), first.iteration);
    for v in vectors.iter() {
        if v.source_arch != arch {
            return Err(AtmError::ArchMismatch(format!(
                "task vector {} has layout {:?}, expected {:?}",
                v.task_id, v.source_arch.layer_widths, arch.layer_widths
            )));
        }
        if v.iteration != iteration {
            return Err(AtmError::config(format!(
                "task vector {} is from iteration {}, expected {}",
                v.task_id, v.iteration, iteration
            )));
        }
    }
    vectors.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(())
}

/// Left-to-right sum in sorted `task_id` order, accumulated into the first
/// buffer. Returns the sum and the contributing ids.
pub(crate) fn sorted_sum<T: Scalar>(mut vectors: Vec<TaskVector<T>>) -> Result<(TaskVector<T>, Vec<String>)> {
    prepare(&mut vectors)?;
    let ids = vectors.iter().map(|v| v.task_id.clone()).collect();
    let mut iter = vectors.into_iter();
    let mut acc = iter.next().expect("prepare rejects empty lists");
    for v in iter {
        for (a, &x) in acc.delta.iter_mut().zip(v.delta.iter()) {
            *a += x;
        }
    }
    Ok((acc, ids))
}

/// `(1/n) * sum(tau_i)`.
pub fn aggregate_mean<T: Scalar>(vectors: Vec<TaskVector<T>>) -> Result<MultitaskVector<T>> {
    let n = T::from_usize_lossy(vectors.len());
    let (mut acc, ids) = sorted_sum(vectors)?;
    for a in acc.delta.iter_mut() {
        *a /= n;
    }
    Ok(MultitaskVector {
        delta: acc.delta,
        contributing_tasks: ids,
        aggregator_name: "mean".into(),
        arch: acc.source_arch,
    })
}

/// `base + alpha * mtv.delta`, in the base model's buffer.
pub fn apply<T: Scalar>(mut base: ModelState<T>, mtv: &MultitaskVector<T>, alpha: T) -> Result<ModelState<T>> {
    base.ensure_same_arch(&mtv.arch)?;
    if !alpha.is_finite() {
        return Err(AtmError::config("alpha must be finite"));
    }
    for (p, &d) in base.params_mut().iter_mut().zip(mtv.delta.iter()) {
        *p += alpha * d;
    }
    Ok(base)
}
