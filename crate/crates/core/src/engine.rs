//! The tune-then-merge loop.
//!
//! One iteration finetunes the current base separately on every task,
//! converts each result into a task vector, aggregates them and adds the
//! aggregate (scaled by `alpha`) to the base. Task vectors are dropped after
//! the merge, so at most one base model and one task vector per task are
//! alive at any time.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::merge::{resolve, Aggregator};
use crate::numeric::{evaluate_accuracy, finetune, loss, LabeledBatch, ModelState, TrainConfig};
use crate::seed::derive_seed;
use crate::synth::{TaskData, TaskSuite};
use crate::task_vector::{apply, compute_task_vector};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtmMode {
    /// Pretrained start, finetuning on each task's train split.
    Pa,
    /// Merged start, finetuning on each task's validation split.
    Ph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    FixedK,
    ValPlateau,
}

/// `ValPlateau` stops once mean validation accuracy has failed to beat the
/// best value so far by more than `min_delta` for `patience` consecutive
/// iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub kind: StopKind,
    #[serde(default)]
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            kind: StopKind::FixedK,
            patience: 0,
            min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmConfig {
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "Aggregator::mean")]
    pub aggregator: Aggregator,
    /// Template for every finetuning call; `epochs` is replaced by
    /// `epochs_per_iteration` and `seed` serves as the root of the per-task
    /// seeds.
    pub train: TrainConfig,
    pub mode: AtmMode,
    #[serde(default)]
    pub stop: StopRule,
    /// Index of the first iteration; lets a run resume where another ended.
    #[serde(default)]
    pub start_iteration: usize,
}

fn default_alpha() -> f64 {
    1.0
}

impl AtmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(AtmError::config("iterations must be at least 1"));
        }
        if self.epochs_per_iteration == 0 {
            return Err(AtmError::config("epochs_per_iteration must be at least 1"));
        }
        if !self.alpha.is_finite() {
            return Err(AtmError::config("alpha must be finite"));
        }
        if self.stop.kind == StopKind::ValPlateau && self.stop.patience == 0 {
            return Err(AtmError::config("val_plateau stop rule needs patience >= 1"));
        }
        if self.stop.min_delta.is_nan() || self.stop.min_delta < 0.0 {
            return Err(AtmError::config("stop min_delta must be non-negative"));
        }
        self.aggregator.validate()?;
        self.train.validate()
    }

    /// Training configuration used for `task_id` at iteration `k`.
    pub fn task_train_config(&self, task_id: &str, k: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_per_iteration,
            seed: derive_seed(self.train.seed, task_id, k as u64),
            ..self.train.clone()
        }
    }

    /// The split this mode finetunes on.
    pub fn tuning_split<'a, T: Scalar>(&self, task: &'a TaskData<T>) -> &'a LabeledBatch<T> {
        match self.mode {
            AtmMode::Pa => task.train(),
            AtmMode::Ph => task.val(),
        }
    }
}

/// Per-iteration summary. Accuracies and losses are those of the merged
/// model on each task's validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub per_task_accuracy: BTreeMap<String, f64>,
    pub mean_accuracy: f64,
    pub per_task_loss: BTreeMap<String, f64>,
    pub task_vector_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport<T: Scalar> {
    pub config: AtmConfig,
    pub iterations: Vec<IterationReport>,
    pub final_model: ModelState<T>,
    pub wall_time_seconds: f64,
}

/// One tune-and-merge round from `base` at iteration index `k`.
pub fn atm_iteration<T: Scalar>(
    base: ModelState<T>,
    suite: &TaskSuite<T>,
    cfg: &AtmConfig,
    k: usize,
) -> Result<(ModelState<T>, IterationReport)> {
    if suite.is_empty() {
        return Err(AtmError::Empty("task suite"));
    }
    if base.arch().input_dim() != suite.feature_dim || base.arch().class_count() != suite.class_count {
        return Err(AtmError::ArchMismatch(format!(
            "model {:?} does not fit a suite with {} features and {} classes",
            base.arch().layer_widths,
            suite.feature_dim,
            suite.class_count
        )));
    }

    let mut vectors = Vec::with_capacity(suite.len());
    let mut norms = BTreeMap::new();
    for task in &suite.tasks {
        let data = cfg.tuning_split(task);
        let tuned = finetune(base.clone(), data, &cfg.task_train_config(&task.task_id, k))?;
        let tau = compute_task_vector(tuned, &base, task.task_id.clone(), k)?;
        norms.insert(task.task_id.clone(), tau.delta.l2_norm().to_f64_lossy());
        vectors.push(tau);
    }
    let merged = resolve(&cfg.aggregator, vectors)?;
    let next = apply(base, &merged, T::from_f64_lossy(cfg.alpha))?;
    drop(merged);

    let mut per_task_accuracy = BTreeMap::new();
    let mut per_task_loss = BTreeMap::new();
    for task in &suite.tasks {
        let val = task.val();
        if val.is_empty() {
            continue;
        }
        per_task_accuracy.insert(task.task_id.clone(), evaluate_accuracy(&next, val)?);
        per_task_loss.insert(task.task_id.clone(), loss(&next, val)?.to_f64_lossy());
    }
    let mean_accuracy = if per_task_accuracy.is_empty() {
        f64::NAN
    } else {
        per_task_accuracy.values().sum::<f64>() / per_task_accuracy.len() as f64
    };
    let report = IterationReport {
        iteration: k,
        per_task_accuracy,
        mean_accuracy,
        per_task_loss,
        task_vector_norms: norms,
    };
    let next = next.with_label(format!("base@k={}", k + 1));
    Ok((next, report))
}

fn run_loop<T: Scalar>(initial: ModelState<T>, suite: &TaskSuite<T>, cfg: &AtmConfig) -> Result<RunReport<T>> {
    cfg.validate()?;
    let started = Instant::now();
    let mut base = initial;
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for k in cfg.start_iteration..cfg.start_iteration + cfg.iterations {
        let (next, report) = atm_iteration(base, suite, cfg, k)?;
        base = next;
        let score = report.mean_accuracy;
        reports.push(report);
        if cfg.stop.kind == StopKind::ValPlateau {
            if score > best + cfg.stop.min_delta {
                best = score;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.stop.patience {
                    break;
                }
            }
        }
    }
    Ok(RunReport {
        config: cfg.clone(),
        iterations: reports,
        final_model: base,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Privacy-aware ATM: start from a pretrained model, finetune every task on
/// its own train split only.
pub fn run_pa_atm<T: Scalar>(pretrained: ModelState<T>, suite: &TaskSuite<T>, cfg: &AtmConfig) -> Result<RunReport<T>> {
    if cfg.mode != AtmMode::Pa {
        return Err(AtmError::config("run_pa_atm needs mode \"pa\""));
    }
    run_loop(pretrained, suite, cfg)
}

/// Post-hoc ATM: refine an already merged model using validation splits
/// only. Test splits are never read.
pub fn run_ph_atm<T: Scalar>(merged_init: ModelState<T>, suite: &TaskSuite<T>, cfg: &AtmConfig) -> Result<RunReport<T>> {
    if cfg.mode != AtmMode::Ph {
        return Err(AtmError::config("run_ph_atm needs mode \"ph\""));
    }
    cfg.validate()?;
    if let Some(t) = suite.tasks.iter().find(|t| t.split_sizes().1 == 0) {
        return Err(AtmError::config(format!("task {:?} has an empty validation split", t.task_id)));
    }
    run_loop(merged_init, suite, cfg)
}

/// Epochs per iteration when `total_epochs` are spread over `iterations`.
pub fn distribute_budget(total_epochs: usize, iterations: usize) -> Result<usize> {
    if total_epochs == 0 || iterations == 0 {
        return Err(AtmError::config("budget and iteration count must be positive"));
    }
    if !total_epochs.is_multiple_of(iterations) {
        return Err(AtmError::config(format!(
            "{iterations} iterations do not divide a budget of {total_epochs} epochs"
        )));
    }
    Ok(total_epochs / iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradient, init_model, max_abs_diff, Activation, ArchSpec, BatchSize};
    use crate::synth::{generate_task_suite, SuiteSpec};

    fn small_suite(num_tasks: usize) -> TaskSuite<f64> {
        generate_task_suite(&SuiteSpec {
            num_tasks,
            samples_per_task: 120,
            feature_dim: 5,
            class_count: 3,
            ..SuiteSpec::default()
        })
        .unwrap()
    }

    fn model() -> ModelState<f64> {
        init_model(&ArchSpec::new(vec![5, 6, 3], Activation::Tanh).unwrap(), 2).unwrap()
    }

    fn cfg(mode: AtmMode, batch: BatchSize) -> AtmConfig {
        AtmConfig {
            iterations: 3,
            epochs_per_iteration: 1,
            alpha: 1.0,
            aggregator: Aggregator::mean(),
            train: TrainConfig {
                epochs: 1,
                learning_rate: 0.1,
                batch_size: batch,
                seed: 5,
                shuffle: batch != BatchSize::Full,
            },
            mode,
            stop: StopRule::default(),
            start_iteration: 0,
        }
    }

    #[test]
    fn budget_distribution() {
        assert_eq!(distribute_budget(10, 5).unwrap(), 2);
        assert_eq!(distribute_budget(10, 10).unwrap(), 1);
        assert_eq!(distribute_budget(10, 1).unwrap(), 10);
        assert!(distribute_budget(10, 4).is_err());
        assert!(distribute_budget(10, 0).is_err());
    }

    #[test]
    fn single_task_full_batch_iteration_is_gd_step() {
        let suite = small_suite(1);
        let base = model();
        let c = cfg(AtmMode::Pa, BatchSize::Full);
        let (next, _) = atm_iteration(base.clone(), &suite, &c, 0).unwrap();
        let g = gradient(&base, suite.tasks[0].train()).unwrap();
        let expected: Vec<f64> = base.params().iter().zip(&g.values).map(|(p, g)| p - 0.1 * g).collect();
        assert!(max_abs_diff(next.params(), &expected) <= 1e-12);
    }

    #[test]
    fn zero_alpha_keeps_base_but_reports() {
        let suite = small_suite(2);
        let base = model();
        let c = AtmConfig {
            alpha: 0.0,
            ..cfg(AtmMode::Pa, BatchSize::Mini(16))
        };
        let (next, report) = atm_iteration(base.clone(), &suite, &c, 0).unwrap();
        assert_eq!(next.params().as_slice(), base.params().as_slice());
        assert_eq!(report.task_vector_norms.len(), 2);
        assert!(report.task_vector_norms.values().all(|&n| n > 0.0));
    }

    #[test]
    fn duplicated_task_matches_single_task() {
        let one = small_suite(1);
        let mut twin = one.tasks[0].clone();
        twin.task_id = "task0-copy".into();
        let two = TaskSuite::new(vec![one.tasks[0].clone(), twin], 0).unwrap();
        let c = cfg(AtmMode::Pa, BatchSize::Full);
        let (a, _) = atm_iteration(model(), &one, &c, 0).unwrap();
        let (b, _) = atm_iteration(model(), &two, &c, 0).unwrap();
        assert!(max_abs_diff(a.params(), b.params()) <= 1e-15);
    }

    #[test]
    fn resumed_run_equals_single_run() {
        let suite = small_suite(3);
        let c = cfg(AtmMode::Pa, BatchSize::Mini(8));
        let whole = run_pa_atm(model(), &suite, &AtmConfig { iterations: 4, ..c.clone() }).unwrap();
        let first = run_pa_atm(model(), &suite, &AtmConfig { iterations: 2, ..c.clone() }).unwrap();
        let second = run_pa_atm(
            first.final_model,
            &suite,
            &AtmConfig {
                iterations: 2,
                start_iteration: 2,
                ..c
            },
        )
        .unwrap();
        assert_eq!(whole.final_model.params().as_slice(), second.final_model.params().as_slice());
        assert_eq!(whole.iterations[2..], second.iterations[..]);
    }

    #[test]
    fn mode_and_config_checks() {
        let suite = small_suite(2);
        assert!(run_pa_atm(model(), &suite, &cfg(AtmMode::Ph, BatchSize::Full)).is_err());
        assert!(run_ph_atm(model(), &suite, &cfg(AtmMode::Pa, BatchSize::Full)).is_err());
        let zero_k = AtmConfig {
            iterations: 0,
            ..cfg(AtmMode::Ph, BatchSize::Full)
        };
        assert!(run_ph_atm(model(), &suite, &zero_k).is_err());
        let plateau = AtmConfig {
            stop: StopRule {
                kind: StopKind::ValPlateau,
                patience: 0,
                min_delta: 0.0,
            },
            ..cfg(AtmMode::Pa, BatchSize::Full)
        };
        assert!(plateau.validate().is_err());
    }

    #[test]
    fn ph_rejects_empty_validation_before_training() {
        let suite = small_suite(1);
        let t = &suite.tasks[0];
        let hollow = TaskData::new(
            "hollow",
            t.class_count,
            t.train().clone(),
            LabeledBatch::empty(t.dim()),
            t.test().clone(),
        )
        .unwrap();
        let suite = TaskSuite::new(vec![hollow], 0).unwrap();
        let err = run_ph_atm(model(), &suite, &cfg(AtmMode::Ph, BatchSize::Full)).unwrap_err();
        assert!(err.to_string().contains("validation"));
        assert_eq!(suite.tasks[0].reads().train, 0);
    }

    #[test]
    fn plateau_stops_early() {
        let suite = small_suite(2);
        let c = AtmConfig {
            iterations: 50,
            alpha: 0.0,
            stop: StopRule {
                kind: StopKind::ValPlateau,
                patience: 2,
                min_delta: 0.0,
            },
            ..cfg(AtmMode::Pa, BatchSize::Full)
        };
        // alpha = 0 never changes the base, so accuracy plateaus immediately
        let report = run_pa_atm(model(), &suite, &c).unwrap();
        assert_eq!(report.iterations.len(), 3);
    }

    #[test]
    fn ph_never_reads_test_or_train() {
        let suite = small_suite(3);
        suite.reset_reads();
        run_ph_atm(model(), &suite, &cfg(AtmMode::Ph, BatchSize::Mini(4))).unwrap();
        for t in &suite.tasks {
            let r = t.reads();
            assert_eq!((r.train, r.test), (0, 0));
            assert!(r.val > 0);
        }
    }
}
