use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::backprop::gradient;
use super::batch::{BatchView, LabeledBatch};
use super::model::{gd_step, ModelState};
use crate::error::{AtmError, Result};
use crate::seed::rng_from_seed;
use crate::Scalar;

/// Mini-batch size; `Full` takes one step per epoch on the whole split.
///
/// Serialized as the string `"full"` or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    Full,
    Mini(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Mini(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Tag(String),
            Size(usize),
        }
        match Repr::deserialize(d)? {
            Repr::Tag(t) if t == "full" => Ok(BatchSize::Full),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!(
                "batch_size must be \"full\" or a positive integer, got {t:?}"
            ))),
            Repr::Size(n) => Ok(BatchSize::Mini(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_shuffle() -> bool {
    true
}

impl TrainConfig {
    /// One exact gradient-descent step on the whole split.
    pub fn one_full_batch_step(learning_rate: f64) -> Self {
        TrainConfig {
            epochs: 1,
            learning_rate,
            batch_size: BatchSize::Full,
            seed: 0,
            shuffle: false,
        }
    }

    pub fn is_exact_gd_step(&self) -> bool {
        self.epochs == 1 && self.batch_size == BatchSize::Full && !self.shuffle
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(AtmError::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == BatchSize::Mini(0) {
            return Err(AtmError::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Plain (S)GD for `cfg.epochs` passes over `data`.
///
/// Full-batch epochs are single [`gd_step`]s. Mini-batch epochs walk the
/// rows in chunks of `batch_size` (the last chunk may be short), reshuffled
/// each epoch from one ChaCha8 stream seeded with `cfg.seed` when
/// `cfg.shuffle` is set.
pub fn finetune<T: Scalar>(
    model: ModelState<T>,
    data: &LabeledBatch<T>,
    cfg: &TrainConfig,
) -> Result<ModelState<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AtmError::Empty("training split"));
    }
    let eta = T::from_f64_lossy(cfg.learning_rate);
    let mut model = model;
    match cfg.batch_size {
        BatchSize::Full => {
            for _ in 0..cfg.epochs {
                let g = gradient(&model, data)?;
                model = gd_step(model, &g, eta)?;
            }
        }
        BatchSize::Mini(size) => {
            let mut rng = rng_from_seed(cfg.seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..cfg.epochs {
                if cfg.shuffle {
                    order.shuffle(&mut rng);
                }
                for chunk in order.chunks(size) {
                    let g = gradient(&model, BatchView::subset(data, chunk))?;
                    model = gd_step(model, &g, eta)?;
                }
            }
        }
    }
    Ok(model)
}
