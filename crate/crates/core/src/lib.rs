//! Alternating tuning and merging (ATM) of task vectors.
//!
//! The crate trains small fully connected classifiers from scratch, turns
//! finetuned models into task vectors, merges them (task arithmetic, TIES,
//! DARE, breadcrumbs) and runs the iterative tune-then-merge loop in its
//! privacy-aware (train data, pretrained start) and post-hoc (validation
//! data, merged start) forms. [`theory`] holds executable checks of the
//! task-vector/gradient identity and an independent finite-difference
//! gradient.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the harness and the binary
//! formats use.

pub mod engine;
pub mod error;
pub mod harness;
pub mod merge;
pub mod numeric;
pub mod probe;
mod scalar;
pub mod seed;
pub mod synth;
pub mod task_vector;
pub mod theory;

pub use error::{AtmError, Result};
pub use scalar::Scalar;

pub use engine::{AtmConfig, AtmMode, StopKind, StopRule};
pub use merge::{Aggregator, AggregatorKind};
pub use numeric::{Activation, ArchSpec, BatchSize, TrainConfig};
pub use synth::SuiteSpec;

pub type ParamVector = numeric::ParamVector<f64>;
pub type GradientVector = numeric::GradientVector<f64>;
pub type ModelState = numeric::ModelState<f64>;
pub type LabeledBatch = numeric::LabeledBatch<f64>;
pub type TaskVector = task_vector::TaskVector<f64>;
pub type MultitaskVector = task_vector::MultitaskVector<f64>;
pub type TaskData = synth::TaskData<f64>;
pub type TaskSuite = synth::TaskSuite<f64>;
pub type RunReport = engine::RunReport<f64>;

pub type ModelStateF32 = numeric::ModelState<f32>;
pub type TaskVectorF32 = task_vector::TaskVector<f32>;
pub type TaskSuiteF32 = synth::TaskSuite<f32>;
