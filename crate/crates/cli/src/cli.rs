use std::path::PathBuf;

use atm_core::harness::Format;
use atm_core::AggregatorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "atm", version, about = "Alternating tuning and merging experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON). The built-in default experiment is used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed; overrides the config's `root_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Suppress stdout reports and stderr progress.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Task suite files.
    #[command(subcommand)]
    Suite(SuiteCommand),
    /// Build the pretrained starting model and save it.
    Pretrain,
    /// Finetune per-task models from the pretrained model.
    Finetune(FinetuneArgs),
    /// Merge saved finetuned checkpoints into a saved base checkpoint.
    Merge(MergeArgs),
    /// ATM runs.
    #[command(subcommand)]
    Atm(AtmCommand),
    /// Every configured method at the config's budget.
    Compare,
    /// Budget sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Exactness checks.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Test accuracy of a saved model on every task.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum SuiteCommand {
    /// Generate the configured suite and write it to `<out>/suite.atms`.
    Gen,
}

#[derive(Debug, Subcommand)]
pub enum AtmCommand {
    /// Run every PA-ATM and PH-ATM method in the config.
    Run,
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    /// Every method at each per-task budget, plus the flatness summary.
    Budget {
        /// Comma-separated budgets; defaults to the config's `budgets`.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// PA-ATM at equal total epochs split over different iteration counts.
    Distribution {
        #[arg(long)]
        total: Option<usize>,
        /// Comma-separated iteration counts, each dividing the total.
        #[arg(long, value_delimiter = ',')]
        options: Option<Vec<usize>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CheckCommand {
    /// Full-batch task-vector/gradient identity at the pretrained model.
    Lemma {
        /// Report a single task instead of the multitask identity.
        #[arg(long)]
        task: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Tasks to finetune; all tasks when omitted.
    #[arg(long = "task")]
    pub tasks: Vec<String>,
    /// Epochs per task; defaults to the config's `budget_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Start from this checkpoint instead of the pretrained model.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Checkpoint the task vectors are taken against.
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    /// Finetuned checkpoints; their file stems are the task ids.
    #[arg(required = true, value_name = "MODEL")]
    pub models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "sum-ta")]
    pub aggregator: AggregatorArg,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Output checkpoint; defaults to `<out>/merged.atmc`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregatorArg {
    Mean,
    SumTa,
    Ties,
    Dare,
    Breadcrumbs,
}

impl From<AggregatorArg> for AggregatorKind {
    fn from(a: AggregatorArg) -> Self {
        match a {
            AggregatorArg::Mean => AggregatorKind::Mean,
            AggregatorArg::SumTa => AggregatorKind::SumTa,
            AggregatorArg::Ties => AggregatorKind::Ties,
            AggregatorArg::Dare => AggregatorKind::DareThenMean,
            AggregatorArg::Breadcrumbs => AggregatorKind::BreadcrumbsThenMean,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
}
