//! Experiment orchestration: baseline comparison, budget sweep and
//! budget-distribution sweep.
//!
//! Every random stream is derived from the experiment's `root_seed`, with
//! a distinct label per consumer (`suite`, `pretrain-suite`, `init`,
//! `pretrain`, `finetune`, `atm`, `aggregator`).

use std::collections::BTreeMap;

use super::checkpoint::{load_checkpoint, load_suite};
use super::config::{AtmSettings, ExperimentConfig, MethodKind, MethodSpec, PretrainSource, SuiteSource};
use super::report::{FlatnessRow, IterationRow, ReportRow, AVERAGE_TASK};
use crate::engine::{distribute_budget, run_pa_atm, run_ph_atm, AtmConfig, AtmMode, IterationReport};
use crate::error::{AtmError, Result};
use crate::merge::{resolve, Aggregator};
use crate::numeric::{evaluate_accuracy, finetune, init_model, loss, LabeledBatch, ModelState, TrainConfig};
use crate::seed::derive_seed;
use crate::synth::{generate_task_suite, SuiteSpec, TaskSuite};
use crate::task_vector::{apply, compute_task_vector};
use crate::theory::{check_multitask_vector_is_average_gradient, check_task_vector_is_scaled_gradient, EquivalenceReport};

/// Suite and starting model materialized from a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub suite: TaskSuite<f64>,
    pub pretrained: ModelState<f64>,
    config_hash: String,
}

/// Result of running one method at one budget.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub rows: Vec<ReportRow>,
    pub trace: Vec<IterationReport>,
    /// The single model the method produces; `None` for `finetuned`.
    pub model: Option<ModelState<f64>>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ReportRow>,
    pub traces: BTreeMap<String, Vec<IterationReport>>,
}

#[derive(Debug, Clone)]
pub struct BudgetSweep {
    pub rows: Vec<ReportRow>,
    pub flatness: Vec<FlatnessRow>,
}

fn effective_suite_spec(spec: &SuiteSpec, root: u64, label: &str) -> SuiteSpec {
    SuiteSpec {
        seed: derive_seed(root, label, spec.seed),
        ..spec.clone()
    }
}

/// Builds the evaluation suite named by the config.
pub fn build_suite(cfg: &ExperimentConfig) -> Result<TaskSuite<f64>> {
    match &cfg.suite {
        SuiteSource::Spec(spec) => generate_task_suite(&effective_suite_spec(spec, cfg.root_seed, "suite")),
        SuiteSource::Path(p) => load_suite(p),
    }
}

/// Pooled training rows of a suite drawn with the pretraining seed, which
/// is disjoint from the evaluation suite's.
pub fn pretraining_pool(cfg: &ExperimentConfig, suite: &TaskSuite<f64>) -> Result<LabeledBatch<f64>> {
    let template = match &cfg.suite {
        SuiteSource::Spec(spec) => spec.clone(),
        SuiteSource::Path(_) => SuiteSpec {
            num_tasks: suite.len(),
            feature_dim: suite.feature_dim,
            class_count: suite.class_count,
            ..SuiteSpec::default()
        },
    };
    let pool_suite: TaskSuite<f64> =
        generate_task_suite(&effective_suite_spec(&template, cfg.root_seed, "pretrain-suite"))?;
    let parts: Vec<LabeledBatch<f64>> = pool_suite.tasks.iter().map(|t| t.train().clone()).collect();
    LabeledBatch::concat(suite.feature_dim, &parts)
}

pub fn build_pretrained(cfg: &ExperimentConfig, suite: &TaskSuite<f64>) -> Result<ModelState<f64>> {
    let model = match &cfg.pretrain {
        PretrainSource::Checkpoint(p) => load_checkpoint(p)?,
        PretrainSource::Train(train) => {
            let init = init_model(&cfg.arch, derive_seed(cfg.root_seed, "init", 0))?;
            let pool = pretraining_pool(cfg, suite)?;
            let train = TrainConfig {
                seed: derive_seed(cfg.root_seed, "pretrain", train.seed),
                ..train.clone()
            };
            finetune(init, &pool, &train)?
        }
    };
    if model.arch().input_dim() != suite.feature_dim || model.arch().class_count() != suite.class_count {
        return Err(AtmError::ArchMismatch(format!(
            "pretrained model {:?} does not fit the suite",
            model.arch().layer_widths
        )));
    }
    Ok(model.with_label("pretrained"))
}

/// Test accuracy and loss of `model` on every task.
pub fn evaluate_on_test(model: &ModelState<f64>, suite: &TaskSuite<f64>) -> Result<Vec<(String, f64, f64)>> {
    suite
        .tasks
        .iter()
        .map(|t| {
            let test = t.test();
            Ok((t.task_id.clone(), evaluate_accuracy(model, test)?, loss(model, test)?))
        })
        .collect()
}

struct RowMeta<'a> {
    method: &'a str,
    alpha: Option<f64>,
    aggregator: &'a str,
    iterations: usize,
    epochs_per_iteration: usize,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let suite = build_suite(&config)?;
        let pretrained = build_pretrained(&config, &suite)?;
        let config_hash = config.hash();
        Ok(Experiment {
            config,
            suite,
            pretrained,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn rows(&self, meta: RowMeta<'_>, scores: &[(String, f64, f64)]) -> Vec<ReportRow> {
        let make = |task: &str, accuracy: f64, loss: f64| ReportRow {
            method: meta.method.to_string(),
            task: task.to_string(),
            split: "test".into(),
            accuracy,
            loss,
            alpha: meta.alpha,
            aggregator: meta.aggregator.to_string(),
            iterations: meta.iterations,
            epochs_per_iteration: meta.epochs_per_iteration,
            seed: self.config.root_seed,
            config_hash: self.config_hash.clone(),
        };
        let mut rows: Vec<ReportRow> = scores.iter().map(|(t, a, l)| make(t, *a, *l)).collect();
        let n = scores.len() as f64;
        let mean_acc = scores.iter().map(|s| s.1).sum::<f64>() / n;
        let mean_loss = scores.iter().map(|s| s.2).sum::<f64>() / n;
        rows.push(make(AVERAGE_TASK, mean_acc, mean_loss));
        rows
    }

    /// Finetuning configuration of the per-task models at `budget` epochs.
    pub fn task_finetune_config(&self, task_id: &str, budget: usize) -> TrainConfig {
        let root = derive_seed(self.config.root_seed, "finetune", self.config.finetune.seed);
        TrainConfig {
            epochs: budget,
            seed: derive_seed(root, task_id, 0),
            ..self.config.finetune.clone()
        }
    }

    /// One model per task, finetuned from the pretrained model on that
    /// task's train split for `budget` epochs.
    pub fn finetune_all(&self, budget: usize) -> Result<Vec<ModelState<f64>>> {
        self.suite
            .tasks
            .iter()
            .map(|t| {
                let cfg = self.task_finetune_config(&t.task_id, budget);
                finetune(self.pretrained.clone(), t.train(), &cfg).map(|m| m.with_label(format!("finetuned:{}", t.task_id)))
            })
            .collect()
    }

    fn seeded_aggregator(&self, agg: &Aggregator) -> Aggregator {
        Aggregator {
            seed: derive_seed(self.config.root_seed, "aggregator", agg.seed),
            ..agg.clone()
        }
    }

    /// One-shot merge of finetuned task models into the pretrained model.
    pub fn merge_models(&self, finetuned: &[ModelState<f64>], agg: &Aggregator, alpha: f64) -> Result<ModelState<f64>> {
        let vectors = finetuned
            .iter()
            .zip(&self.suite.tasks)
            .map(|(m, t)| compute_task_vector(m.clone(), &self.pretrained, t.task_id.clone(), 0))
            .collect::<Result<Vec<_>>>()?;
        let merged = resolve(&self.seeded_aggregator(agg), vectors)?;
        apply(self.pretrained.clone(), &merged, alpha)
    }

    pub fn atm_config(&self, settings: &AtmSettings, mode: AtmMode, iterations: usize) -> AtmConfig {
        let mut cfg = settings.to_config(mode, &self.config.finetune);
        cfg.iterations = iterations;
        cfg.train.seed = derive_seed(self.config.root_seed, "atm", cfg.train.seed);
        cfg.aggregator = self.seeded_aggregator(&cfg.aggregator);
        cfg
    }

    /// Runs one method. `budget` fixes the baselines' finetuning epochs;
    /// `atm_iterations` overrides the ATM iteration count when given.
    pub fn run_method(
        &self,
        method: &MethodSpec,
        budget: usize,
        atm_iterations: Option<usize>,
        finetuned: &mut FinetuneCache,
    ) -> Result<MethodOutcome> {
        let name = method.name.as_str();
        match &method.kind {
            MethodKind::Pretrained => {
                let scores = evaluate_on_test(&self.pretrained, &self.suite)?;
                let meta = RowMeta {
                    method: name,
                    alpha: None,
                    aggregator: "none",
                    iterations: 0,
                    epochs_per_iteration: 0,
                };
                Ok(MethodOutcome {
                    rows: self.rows(meta, &scores),
                    trace: Vec::new(),
                    model: Some(self.pretrained.clone()),
                })
            }
            MethodKind::Finetuned => {
                let models = finetuned.get(self, budget)?;
                let scores = models
                    .iter()
                    .zip(&self.suite.tasks)
                    .map(|(m, t)| {
                        let test = t.test();
                        Ok((t.task_id.clone(), evaluate_accuracy(m, test)?, loss(m, test)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let meta = RowMeta {
                    method: name,
                    alpha: None,
                    aggregator: "none",
                    iterations: 1,
                    epochs_per_iteration: budget,
                };
                Ok(MethodOutcome {
                    rows: self.rows(meta, &scores),
                    trace: Vec::new(),
                    model: None,
                })
            }
            MethodKind::Merge { aggregator, alpha } => {
                let merged = self.merge_models(finetuned.get(self, budget)?, aggregator, *alpha)?;
                let scores = evaluate_on_test(&merged, &self.suite)?;
                let meta = RowMeta {
                    method: name,
                    alpha: Some(*alpha),
                    aggregator: aggregator.kind.name(),
                    iterations: 1,
                    epochs_per_iteration: budget,
                };
                Ok(MethodOutcome {
                    rows: self.rows(meta, &scores),
                    trace: Vec::new(),
                    model: Some(merged.with_label(name)),
                })
            }
            MethodKind::PaAtm { atm } => {
                let cfg = self.atm_config(atm, AtmMode::Pa, atm_iterations.unwrap_or(atm.iterations));
                let report = run_pa_atm(self.pretrained.clone(), &self.suite, &cfg)?;
                self.atm_outcome(name, &cfg, report)
            }
            MethodKind::PhAtm { atm, init } => {
                let init_method = self
                    .config
                    .method(init)
                    .ok_or_else(|| AtmError::config(format!("unknown init method {init:?}")))?;
                let start = self
                    .run_method(init_method, budget, None, finetuned)?
                    .model
                    .ok_or_else(|| AtmError::config(format!("init method {init:?} yields no single model")))?;
                let cfg = self.atm_config(atm, AtmMode::Ph, atm_iterations.unwrap_or(atm.iterations));
                let report = run_ph_atm(start, &self.suite, &cfg)?;
                self.atm_outcome(name, &cfg, report)
            }
        }
    }

    fn atm_outcome(&self, name: &str, cfg: &AtmConfig, report: crate::engine::RunReport<f64>) -> Result<MethodOutcome> {
        let scores = evaluate_on_test(&report.final_model, &self.suite)?;
        let meta = RowMeta {
            method: name,
            alpha: Some(cfg.alpha),
            aggregator: cfg.aggregator.kind.name(),
            iterations: report.iterations.len(),
            epochs_per_iteration: cfg.epochs_per_iteration,
        };
        Ok(MethodOutcome {
            rows: self.rows(meta, &scores),
            trace: report.iterations,
            model: Some(report.final_model.with_label(name)),
        })
    }

    /// Every configured method at `budget_epochs`.
    pub fn baseline_comparison(&self) -> Result<Comparison> {
        self.comparison_at(self.config.budget_epochs, |_| Ok(None))
    }

    fn comparison_at(&self, budget: usize, atm_iterations: impl Fn(&AtmSettings) -> Result<Option<usize>>) -> Result<Comparison> {
        if self.config.methods.is_empty() {
            return Err(AtmError::config("no methods configured"));
        }
        let mut cache = FinetuneCache::default();
        let mut rows = Vec::new();
        let mut traces = BTreeMap::new();
        for method in &self.config.methods {
            let iterations = match &method.kind {
                MethodKind::PaAtm { atm } | MethodKind::PhAtm { atm, .. } => atm_iterations(atm)?,
                _ => None,
            };
            let outcome = self.run_method(method, budget, iterations, &mut cache)?;
            rows.extend(outcome.rows);
            if !outcome.trace.is_empty() {
                traces.insert(method.name.clone(), outcome.trace);
            }
        }
        Ok(Comparison { rows, traces })
    }

    /// Every method at each per-task budget. ATM methods spend the budget as
    /// `budget / epochs_per_iteration` iterations.
    pub fn budget_sweep(&self, budgets: &[usize]) -> Result<BudgetSweep> {
        if budgets.is_empty() {
            return Err(AtmError::config("budget sweep needs at least one budget"));
        }
        let mut rows = Vec::new();
        for &budget in budgets {
            let cmp = self.comparison_at(budget, |atm| budget_iterations(budget, atm.epochs_per_iteration).map(Some))?;
            rows.extend(cmp.rows);
        }
        let flatness = self.flatness(&rows);
        Ok(BudgetSweep { rows, flatness })
    }

    fn flatness(&self, rows: &[ReportRow]) -> Vec<FlatnessRow> {
        let mut out = Vec::new();
        for method in &self.config.methods {
            let averages: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method.name && r.is_average())
                .map(|r| r.accuracy)
                .collect();
            if averages.is_empty() {
                continue;
            }
            let min = averages.iter().copied().fold(f64::INFINITY, f64::min);
            let max = averages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(FlatnessRow {
                method: method.name.clone(),
                min_average: min,
                max_average: max,
                spread: max - min,
                config_hash: self.config_hash.clone(),
            });
        }
        out
    }

    /// The first configured PA-ATM method, or a mean-aggregating default.
    pub fn pa_atm_settings(&self) -> (String, AtmSettings) {
        self.config
            .methods
            .iter()
            .find_map(|m| match &m.kind {
                MethodKind::PaAtm { atm } => Some((m.name.clone(), atm.clone())),
                _ => None,
            })
            .unwrap_or_else(|| {
                (
                    "PA-ATM".into(),
                    AtmSettings {
                        iterations: 1,
                        epochs_per_iteration: 1,
                        alpha: 1.0,
                        aggregator: Aggregator::mean(),
                        stop: Default::default(),
                        train: None,
                    },
                )
            })
    }

    /// PA-ATM once per iteration count, each spending `total_epochs` per
    /// task in total.
    pub fn distribution_sweep(&self, total_epochs: usize, iteration_options: &[usize]) -> Result<Vec<ReportRow>> {
        if iteration_options.is_empty() {
            return Err(AtmError::config("distribution sweep needs at least one iteration option"));
        }
        let schedule = iteration_options
            .iter()
            .map(|&k| distribute_budget(total_epochs, k).map(|e| (k, e)))
            .collect::<Result<Vec<_>>>()?;
        let (name, base) = self.pa_atm_settings();
        let mut rows = Vec::new();
        for (iterations, epochs) in schedule {
            let settings = AtmSettings {
                epochs_per_iteration: epochs,
                ..base.clone()
            };
            let cfg = self.atm_config(&settings, AtmMode::Pa, iterations);
            let report = run_pa_atm(self.pretrained.clone(), &self.suite, &cfg)?;
            rows.extend(self.atm_outcome(&name, &cfg, report)?.rows);
        }
        Ok(rows)
    }

    /// Full-batch identity checks at the pretrained model: one report per
    /// task and one for the multitask mean.
    pub fn lemma_check(&self) -> Result<(Vec<(String, EquivalenceReport)>, EquivalenceReport)> {
        let c = &self.config.check;
        let per_task = self
            .suite
            .tasks
            .iter()
            .map(|t| {
                check_task_vector_is_scaled_gradient(&self.pretrained, t.train(), c.eta, &c.regime, c.tolerance)
                    .map(|r| (t.task_id.clone(), r))
            })
            .collect::<Result<Vec<_>>>()?;
        let multitask = check_multitask_vector_is_average_gradient(&self.pretrained, &self.suite, c.eta, c.tolerance)?;
        Ok((per_task, multitask))
    }

    pub fn iteration_rows(&self, method: &str, trace: &[IterationReport]) -> Vec<IterationRow> {
        trace
            .iter()
            .flat_map(|it| {
                it.per_task_accuracy.iter().map(move |(task, &acc)| IterationRow {
                    method: method.to_string(),
                    iteration: it.iteration,
                    task: task.clone(),
                    val_accuracy: acc,
                    val_loss: it.per_task_loss.get(task).copied().unwrap_or(f64::NAN),
                    task_vector_norm: it.task_vector_norms.get(task).copied().unwrap_or(f64::NAN),
                    config_hash: self.config_hash.clone(),
                })
            })
            .collect()
    }
}

fn budget_iterations(budget: usize, epochs_per_iteration: usize) -> Result<usize> {
    if epochs_per_iteration == 0 || !budget.is_multiple_of(epochs_per_iteration) {
        return Err(AtmError::config(format!(
            "budget {budget} is not a multiple of {epochs_per_iteration} epochs per iteration"
        )));
    }
    Ok(budget / epochs_per_iteration)
}

/// Per-task finetuned models, computed once per budget.
#[derive(Debug, Default)]
pub struct FinetuneCache {
    budget: Option<usize>,
    models: Vec<ModelState<f64>>,
}

impl FinetuneCache {
    pub fn get(&mut self, exp: &Experiment, budget: usize) -> Result<&[ModelState<f64>]> {
        if self.budget != Some(budget) {
            self.models = exp.finetune_all(budget)?;
            self.budget = Some(budget);
        }
        Ok(&self.models)
    }
}

pub fn run_baseline_comparison(cfg: ExperimentConfig) -> Result<Comparison> {
    Experiment::prepare(cfg)?.baseline_comparison()
}

pub fn run_budget_sweep(cfg: ExperimentConfig, budgets: &[usize]) -> Result<BudgetSweep> {
    Experiment::prepare(cfg)?.budget_sweep(budgets)
}

pub fn run_distribution_sweep(cfg: ExperimentConfig, total_epochs: usize, iteration_options: &[usize]) -> Result<Vec<ReportRow>> {
    Experiment::prepare(cfg)?.distribution_sweep(total_epochs, iteration_options)
}
