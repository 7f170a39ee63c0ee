//! Synthetic multi-task classification suites.
//!
//! Every task is a Gaussian mixture with one isotropic unit-variance
//! component per class. Class centroids start from a template shared by the
//! whole suite (drawn once, scaled to a radius set by `difficulty`); task
//! `t` then uses
//!
//! ```text
//! mu_{t,c} = cos(phi) * m_c + sin(phi) * (Q_t m_c + o_t),   phi = heterogeneity * pi / 2
//! ```
//!
//! with `Q_t` a random orthogonal matrix and `o_t` a random offset of the
//! template radius. At heterogeneity 0 every task samples the same
//! distribution; at 1 the tasks share nothing but the template's geometry.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::numeric::LabeledBatch;
use crate::seed::{derive_seed, rng_from_seed, AtmRng};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub num_tasks: usize,
    /// Samples generated per task, before the test/validation splits.
    pub samples_per_task: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    /// In (0, 1]; larger values pull class centroids together.
    pub difficulty: f64,
    /// In [0, 1]; larger values rotate and shift tasks further apart.
    pub heterogeneity: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            num_tasks: 4,
            samples_per_task: 2000,
            feature_dim: 16,
            class_count: 4,
            difficulty: 0.5,
            heterogeneity: 0.7,
            seed: 0,
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.samples_per_task == 0 || self.feature_dim == 0 || self.class_count == 0 {
            return Err(AtmError::config("suite counts must all be positive"));
        }
        if !(self.difficulty > 0.0 && self.difficulty <= 1.0) {
            return Err(AtmError::config(format!("difficulty must lie in (0, 1], got {}", self.difficulty)));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(AtmError::config(format!(
                "heterogeneity must lie in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(AtmError::config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    /// Distance of each template centroid from the origin.
    pub fn centroid_radius(&self) -> f64 {
        0.5 + 4.8 * (1.0 - self.difficulty)
    }
}

#[derive(Debug, Default)]
struct ReadCounts {
    train: AtomicUsize,
    val: AtomicUsize,
    test: AtomicUsize,
}

/// Read counts per split, as recorded by the [`TaskData`] accessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitReads {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One task's splits. Each accessor call is counted so tests can audit
/// which data a procedure touched.
#[derive(Debug)]
pub struct TaskData<T: Scalar> {
    pub task_id: String,
    pub class_count: usize,
    train: LabeledBatch<T>,
    val: LabeledBatch<T>,
    test: LabeledBatch<T>,
    reads: ReadCounts,
}

impl<T: Scalar> Clone for TaskData<T> {
    /// The clone starts with fresh read counters.
    fn clone(&self) -> Self {
        TaskData {
            task_id: self.task_id.clone(),
            class_count: self.class_count,
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            reads: ReadCounts::default(),
        }
    }
}

impl<T: Scalar> PartialEq for TaskData<T> {
    fn eq(&self, other: &Self) -> bool {
        self.task_id == other.task_id
            && self.class_count == other.class_count
            && self.train == other.train
            && self.val == other.val
            && self.test == other.test
    }
}

impl<T: Scalar> TaskData<T> {
    pub fn new(
        task_id: impl Into<String>,
        class_count: usize,
        train: LabeledBatch<T>,
        val: LabeledBatch<T>,
        test: LabeledBatch<T>,
    ) -> Result<Self> {
        let dim = train.dim();
        if val.dim() != dim || test.dim() != dim {
            return Err(AtmError::config("task splits have different feature widths"));
        }
        for split in [&train, &val, &test] {
            if let Some(&label) = split.labels().iter().find(|&&y| y >= class_count) {
                return Err(AtmError::Label {
                    label,
                    classes: class_count,
                });
            }
        }
        Ok(TaskData {
            task_id: task_id.into(),
            class_count,
            train,
            val,
            test,
            reads: ReadCounts::default(),
        })
    }

    pub fn train(&self) -> &LabeledBatch<T> {
        self.reads.train.fetch_add(1, Ordering::Relaxed);
        &self.train
    }

    pub fn val(&self) -> &LabeledBatch<T> {
        self.reads.val.fetch_add(1, Ordering::Relaxed);
        &self.val
    }

    pub fn test(&self) -> &LabeledBatch<T> {
        self.reads.test.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Split sizes (train, val, test); not counted as a read.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn reads(&self) -> SplitReads {
        SplitReads {
            train: self.reads.train.load(Ordering::Relaxed),
            val: self.reads.val.load(Ordering::Relaxed),
            test: self.reads.test.load(Ordering::Relaxed),
        }
    }

    pub fn reset_reads(&self) {
        self.reads.train.store(0, Ordering::Relaxed);
        self.reads.val.store(0, Ordering::Relaxed);
        self.reads.test.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite<T: Scalar> {
    pub tasks: Vec<TaskData<T>>,
    pub feature_dim: usize,
    pub class_count: usize,
    pub suite_seed: u64,
}

impl<T: Scalar> TaskSuite<T> {
    pub fn new(tasks: Vec<TaskData<T>>, suite_seed: u64) -> Result<Self> {
        let first = tasks.first().ok_or(AtmError::Empty("task suite"))?;
        let (feature_dim, class_count) = (first.dim(), first.class_count);
        let mut ids = HashSet::new();
        for t in &tasks {
            if !ids.insert(t.task_id.as_str()) {
                return Err(AtmError::config(format!("duplicate task id {:?}", t.task_id)));
            }
            if t.dim() != feature_dim || t.class_count != class_count {
                return Err(AtmError::config(format!(
                    "task {:?} does not match the suite's feature width or class count",
                    t.task_id
                )));
            }
        }
        Ok(TaskSuite {
            tasks,
            feature_dim,
            class_count,
            suite_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn reset_reads(&self) {
        self.tasks.iter().for_each(TaskData::reset_reads);
    }
}

fn gaussian(rng: &mut AtmRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn scale_to(v: &mut [f64], radius: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x *= radius / norm);
    }
}

/// Random orthogonal matrix (row-major) from Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut AtmRng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v = gaussian(rng, dim);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

pub fn task_id(index: usize) -> String {
    format!("task{index}")
}

/// Builds a suite deterministically from `spec`.
pub fn generate_task_suite<T: Scalar>(spec: &SuiteSpec) -> Result<TaskSuite<T>> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let radius = spec.centroid_radius();
    let phi = spec.heterogeneity * std::f64::consts::FRAC_PI_2;
    let (keep, mix) = (phi.cos(), phi.sin());

    let mut template_rng = rng_from_seed(derive_seed(spec.seed, "template", 0));
    let template: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            let mut c = gaussian(&mut template_rng, dim);
            scale_to(&mut c, radius);
            c
        })
        .collect();

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for index in 0..spec.num_tasks {
        let id = task_id(index);
        let mut structure = rng_from_seed(derive_seed(spec.seed, &id, 0));
        let rotation = random_orthogonal(&mut structure, dim);
        let mut offset = gaussian(&mut structure, dim);
        scale_to(&mut offset, radius);
        let centroids: Vec<Vec<f64>> = template
            .iter()
            .map(|m| {
                (0..dim)
                    .map(|r| {
                        let rotated: f64 = rotation[r].iter().zip(m).map(|(q, x)| q * x).sum();
                        keep * m[r] + mix * (rotated + offset[r])
                    })
                    .collect()
            })
            .collect();

        let mut sampler = rng_from_seed(derive_seed(spec.seed, &id, 1));
        let mut all = LabeledBatch::<f64>::empty(dim);
        let mut row = vec![0.0; dim];
        for _ in 0..spec.samples_per_task {
            let label = sampler.random_range(0..spec.class_count);
            for (x, &mu) in row.iter_mut().zip(&centroids[label]) {
                let noise: f64 = sampler.sample(StandardNormal);
                *x = mu + noise;
            }
            all.push(&row, label);
        }

        let (rest, test) = split_train_val(&all, spec.test_fraction, derive_seed(spec.seed, &id, 2))?;
        let (train, val) = split_train_val(&rest, spec.val_fraction, derive_seed(spec.seed, &id, 3))?;
        tasks.push(TaskData::new(id, spec.class_count, train.cast(), val.cast(), test.cast())?);
    }
    TaskSuite::new(tasks, spec.seed)
}

/// Shuffled split holding out `round(val_fraction * N)` rows.
///
/// Both halves keep the rows' original relative order.
pub fn split_train_val<T: Scalar>(
    full: &LabeledBatch<T>,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledBatch<T>, LabeledBatch<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(AtmError::config(format!(
            "split fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = full.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(AtmError::config(format!(
            "splitting {n} rows at fraction {val_fraction} leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (val_idx, train_idx) = order.split_at_mut(n_val);
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((full.select(train_idx), full.select(val_idx)))
}
