//! Small fully connected classifiers trained from scratch with plain (S)GD.

mod arch;
mod backprop;
mod batch;
mod model;
mod params;
mod train;

pub use arch::{Activation, ArchSpec, LayerSlot};
pub use backprop::{evaluate_accuracy, gradient, loss, loss_and_gradient, loss_at, predict};
pub use batch::{BatchView, LabeledBatch};
pub use model::{gd_step, init_model, ModelState};
pub use params::{l2_norm, max_abs, max_abs_diff, relative_l2, GradientVector, ParamVector};
pub use train::{finetune, BatchSize, TrainConfig};
