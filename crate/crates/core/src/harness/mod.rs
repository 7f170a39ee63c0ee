//! Experiment configuration, orchestration, and file formats.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod report;

pub use checkpoint::{load_checkpoint, load_suite, save_checkpoint, save_suite};
pub use config::{AtmSettings, ExperimentConfig, MethodKind, MethodSpec, PretrainSource, SuiteSource};
pub use experiments::{
    run_baseline_comparison, run_budget_sweep, run_distribution_sweep, BudgetSweep, Comparison, Experiment,
    FinetuneCache, MethodOutcome,
};
pub use report::{Format, ReportRow};
