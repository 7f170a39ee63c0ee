//! JSON experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{AtmConfig, AtmMode, StopRule};
use crate::error::{AtmError, Result};
use crate::merge::{Aggregator, AggregatorKind};
use crate::numeric::{Activation, ArchSpec, BatchSize, TrainConfig};
use crate::seed::fnv1a64;
use crate::synth::SuiteSpec;
use crate::theory::Regime;

/// Where the task suite comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSource {
    Spec(SuiteSpec),
    Path(PathBuf),
}

/// Where the pretrained starting model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// Train from a fresh initialization on a pooled mixture of tasks drawn
    /// with a seed disjoint from the evaluation suite.
    Train(TrainConfig),
    Checkpoint(PathBuf),
}

/// ATM settings inside a method entry; the mode comes from the method kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmSettings {
    pub iterations: usize,
    #[serde(default = "one")]
    pub epochs_per_iteration: usize,
    #[serde(default = "unit_alpha")]
    pub alpha: f64,
    #[serde(default = "Aggregator::mean")]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub stop: StopRule,
    /// Falls back to the experiment's `finetune` settings.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn one() -> usize {
    1
}

fn unit_alpha() -> f64 {
    1.0
}

fn baseline_alpha() -> f64 {
    0.4
}

impl AtmSettings {
    pub fn to_config(&self, mode: AtmMode, fallback_train: &TrainConfig) -> AtmConfig {
        AtmConfig {
            iterations: self.iterations,
            epochs_per_iteration: self.epochs_per_iteration,
            alpha: self.alpha,
            aggregator: self.aggregator.clone(),
            train: self.train.clone().unwrap_or_else(|| fallback_train.clone()),
            mode,
            stop: self.stop.clone(),
            start_iteration: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodKind {
    /// The starting model, untouched.
    Pretrained,
    /// Each task evaluated on its own fully finetuned model.
    Finetuned,
    /// One-shot merge of the fully finetuned task vectors.
    Merge {
        aggregator: Aggregator,
        #[serde(default = "baseline_alpha")]
        alpha: f64,
    },
    PaAtm { atm: AtmSettings },
    /// `init` names a `merge` method whose output seeds the loop.
    PhAtm { atm: AtmSettings, init: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSettings {
    pub total_epochs: usize,
    pub iteration_options: Vec<usize>,
}

impl Default for DistributionSettings {
    fn default() -> Self {
        DistributionSettings {
            total_epochs: 10,
            iteration_options: vec![1, 2, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSettings {
    pub eta: f64,
    pub regime: Regime,
    pub tolerance: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            eta: 0.1,
            regime: Regime::FullBatch1Epoch,
            tolerance: crate::theory::EXACT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub suite: SuiteSource,
    pub arch: ArchSpec,
    pub pretrain: PretrainSource,
    /// Finetuning of the per-task models; `epochs` is replaced by the budget.
    pub finetune: TrainConfig,
    pub methods: Vec<MethodSpec>,
    pub budget_epochs: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub distribution: DistributionSettings,
    #[serde(default)]
    pub check: CheckSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_budgets() -> Vec<usize> {
    vec![2, 4, 10]
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| AtmError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| AtmError::config(format!("invalid config {}: {e}", path.display())))?;
        // Relative paths inside a config are relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let SuiteSource::Path(p) = &mut cfg.suite {
            *p = base.join(&*p);
        }
        if let PretrainSource::Checkpoint(p) = &mut cfg.pretrain {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.finetune.validate()?;
        if self.budget_epochs == 0 {
            return Err(AtmError::config("budget_epochs must be positive"));
        }
        match &self.suite {
            SuiteSource::Spec(spec) => {
                spec.validate()?;
                if spec.feature_dim != self.arch.input_dim() || spec.class_count != self.arch.class_count() {
                    return Err(AtmError::config(format!(
                        "arch {:?} does not fit suite with {} features and {} classes",
                        self.arch.layer_widths, spec.feature_dim, spec.class_count
                    )));
                }
            }
            SuiteSource::Path(p) => ensure_exists(p)?,
        }
        match &self.pretrain {
            PretrainSource::Train(t) => t.validate()?,
            PretrainSource::Checkpoint(p) => ensure_exists(p)?,
        }
        let mut names = HashSet::new();
        for m in &self.methods {
            if !names.insert(m.name.as_str()) {
                return Err(AtmError::config(format!("duplicate method name {:?}", m.name)));
            }
            match &m.kind {
                MethodKind::Merge { aggregator, alpha } => {
                    aggregator.validate()?;
                    if !alpha.is_finite() {
                        return Err(AtmError::config(format!("method {:?}: alpha must be finite", m.name)));
                    }
                }
                MethodKind::PaAtm { atm } => atm.to_config(AtmMode::Pa, &self.finetune).validate()?,
                MethodKind::PhAtm { atm, init } => {
                    atm.to_config(AtmMode::Ph, &self.finetune).validate()?;
                    let ok = self
                        .methods
                        .iter()
                        .any(|o| &o.name == init && matches!(o.kind, MethodKind::Merge { .. }));
                    if !ok {
                        return Err(AtmError::config(format!(
                            "method {:?}: init {:?} must name a merge method",
                            m.name, init
                        )));
                    }
                }
                MethodKind::Pretrained | MethodKind::Finetuned => {}
            }
        }
        if self.budgets.contains(&0) {
            return Err(AtmError::config("budgets must be positive"));
        }
        Ok(())
    }

    /// 16 hex digits of FNV-1a over the config's canonical JSON, with
    /// `output_dir` blanked since it does not affect any result.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        format!("{:016x}", fnv1a64(&json))
    }

    pub fn method(&self, name: &str) -> Option<&MethodSpec> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// The configuration the built-in defaults describe: the default suite,
    /// a one-hidden-layer network and the full method roster.
    pub fn default_experiment() -> Self {
        let finetune = TrainConfig {
            epochs: 1,
            learning_rate: 0.1,
            batch_size: BatchSize::Mini(32),
            seed: 0,
            shuffle: true,
        };
        let merge = |name: &str, kind: AggregatorKind, alpha: f64| MethodSpec {
            name: name.into(),
            kind: MethodKind::Merge {
                aggregator: Aggregator::new(kind),
                alpha,
            },
        };
        let atm = |iterations| AtmSettings {
            iterations,
            epochs_per_iteration: 1,
            alpha: 1.0,
            aggregator: Aggregator::mean(),
            stop: StopRule::default(),
            train: None,
        };
        ExperimentConfig {
            suite: SuiteSource::Spec(SuiteSpec::default()),
            arch: ArchSpec {
                layer_widths: vec![16, 32, 4],
                activation: Activation::Relu,
            },
            pretrain: PretrainSource::Train(TrainConfig {
                epochs: 2,
                ..finetune.clone()
            }),
            finetune,
            methods: vec![
                MethodSpec {
                    name: "pretrained".into(),
                    kind: MethodKind::Pretrained,
                },
                MethodSpec {
                    name: "finetuned".into(),
                    kind: MethodKind::Finetuned,
                },
                merge("TA", AggregatorKind::SumTa, 0.4),
                merge("TIES", AggregatorKind::Ties, 1.0),
                merge("DARE", AggregatorKind::DareThenMean, 1.0),
                merge("breadcrumbs", AggregatorKind::BreadcrumbsThenMean, 1.0),
                MethodSpec {
                    name: "PA-ATM".into(),
                    kind: MethodKind::PaAtm { atm: atm(10) },
                },
                MethodSpec {
                    name: "PH-ATM".into(),
                    kind: MethodKind::PhAtm {
                        atm: atm(10),
                        init: "TA".into(),
                    },
                },
            ],
            budget_epochs: 10,
            output_dir: default_output_dir(),
            root_seed: 0,
            budgets: default_budgets(),
            distribution: DistributionSettings::default(),
            check: CheckSettings::default(),
        }
    }
}

fn ensure_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(AtmError::config(format!("referenced file {} does not exist", p.display())))
    }
}
