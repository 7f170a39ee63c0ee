mod cli;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use atm_core::harness::experiments::{build_suite, evaluate_on_test};
use atm_core::harness::report::{encode, to_json, write_text, AVERAGE_TASK};
use atm_core::harness::{load_checkpoint, save_checkpoint, save_suite, Experiment, ExperimentConfig, FinetuneCache, Format, MethodKind, ReportRow};
use atm_core::merge::{merge_task_arithmetic, resolve};
use atm_core::numeric::{evaluate_accuracy, finetune, loss};
use atm_core::seed::derive_seed;
use atm_core::task_vector::{apply, compute_task_vector};
use atm_core::{Aggregator, AggregatorKind, AtmError, ModelState, Result};
use clap::error::ErrorKind;
use clap::Parser;
use serde::Serialize;

use cli::{AtmCommand, CheckCommand, Cli, Command, EvalArgs, FinetuneArgs, GlobalArgs, MergeArgs, SuiteCommand, SweepCommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let start = Instant::now();
    let quiet = cli.global.quiet;
    match run(cli) {
        Ok(()) => {
            if !quiet {
                eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

/// Resolved global settings shared by every subcommand.
struct Session {
    config: ExperimentConfig,
    out_dir: PathBuf,
    format: Option<Format>,
    quiet: bool,
}

impl Session {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default_experiment(),
        };
        if let Some(seed) = global.seed {
            config.root_seed = seed;
        }
        if let Some(out) = &global.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(Session {
            out_dir: config.output_dir.clone(),
            config,
            format: global.format.map(Format::from),
            quiet: global.quiet,
        })
    }

    fn table_format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Writes `<out>/<stem>.<ext>` and echoes the primary report to stdout.
    fn emit<R: Serialize>(&self, stem: &str, rows: &[R], echo: bool) -> Result<()> {
        let format = self.table_format();
        let text = encode(rows, format)?;
        let path = self.path(&format!("{stem}.{}", format.extension()));
        write_text(&path, &text)?;
        self.note(format!("wrote {}", path.display()));
        if echo && !self.quiet {
            print!("{text}");
        }
        Ok(())
    }

    fn save_model(&self, model: &ModelState, path: &Path) -> Result<()> {
        save_checkpoint(model, path)?;
        self.note(format!("wrote {}", path.display()));
        Ok(())
    }

    fn experiment(&self) -> Result<Experiment> {
        Experiment::prepare(self.config.clone())
    }
}

fn run(cli: Cli) -> Result<()> {
    let session = Session::new(&cli.global)?;
    match cli.command {
        Command::Suite(SuiteCommand::Gen) => suite_gen(&session),
        Command::Pretrain => pretrain(&session),
        Command::Finetune(args) => finetune_cmd(&session, &args),
        Command::Merge(args) => merge_cmd(&session, &args),
        Command::Atm(AtmCommand::Run) => atm_run(&session),
        Command::Compare => compare(&session),
        Command::Sweep(SweepCommand::Budget { budgets }) => sweep_budget(&session, budgets),
        Command::Sweep(SweepCommand::Distribution { total, options }) => sweep_distribution(&session, total, options),
        Command::Check(CheckCommand::Lemma { task }) => check_lemma(&session, task.as_deref()),
        Command::Eval(args) => eval(&session, &args),
    }
}

#[derive(Serialize)]
struct SuiteRow {
    task: String,
    train: usize,
    val: usize,
    test: usize,
    feature_dim: usize,
    class_count: usize,
    suite_seed: u64,
    config_hash: String,
}

fn suite_gen(s: &Session) -> Result<()> {
    let suite = build_suite(&s.config)?;
    let path = s.path("suite.atms");
    save_suite(&suite, &path)?;
    s.note(format!("wrote {}", path.display()));
    let hash = s.config.hash();
    let rows: Vec<SuiteRow> = suite
        .tasks
        .iter()
        .map(|t| {
            let (train, val, test) = t.split_sizes();
            SuiteRow {
                task: t.task_id.clone(),
                train,
                val,
                test,
                feature_dim: suite.feature_dim,
                class_count: suite.class_count,
                suite_seed: suite.suite_seed,
                config_hash: hash.clone(),
            }
        })
        .collect();
    s.emit("suite", &rows, true)
}

struct RowMeta<'a> {
    method: &'a str,
    alpha: Option<f64>,
    aggregator: &'a str,
    iterations: usize,
    epochs_per_iteration: usize,
}

fn score_rows(s: &Session, meta: RowMeta<'_>, scores: &[(String, f64, f64)]) -> Vec<ReportRow> {
    let hash = s.config.hash();
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
        seed: s.config.root_seed,
        config_hash: hash.clone(),
    };
    let mut rows: Vec<ReportRow> = scores.iter().map(|(t, a, l)| make(t, *a, *l)).collect();
    if !scores.is_empty() {
        let n = scores.len() as f64;
        let acc = scores.iter().map(|x| x.1).sum::<f64>() / n;
        let loss = scores.iter().map(|x| x.2).sum::<f64>() / n;
        rows.push(make(AVERAGE_TASK, acc, loss));
    }
    rows
}

fn pretrain(s: &Session) -> Result<()> {
    let exp = s.experiment()?;
    s.save_model(&exp.pretrained, &s.path("pretrained.atmc"))?;
    let scores = evaluate_on_test(&exp.pretrained, &exp.suite)?;
    let meta = RowMeta {
        method: "pretrained",
        alpha: None,
        aggregator: "none",
        iterations: 0,
        epochs_per_iteration: 0,
    };
    s.emit("pretrained", &score_rows(s, meta, &scores), true)
}

fn finetune_cmd(s: &Session, args: &FinetuneArgs) -> Result<()> {
    let exp = s.experiment()?;
    let epochs = args.epochs.unwrap_or(s.config.budget_epochs);
    if epochs == 0 {
        return Err(AtmError::config("--epochs must be positive"));
    }
    let start = match &args.model {
        Some(path) => load_checkpoint(path)?,
        None => exp.pretrained.clone(),
    };
    start.ensure_same_arch(exp.pretrained.arch())?;
    for id in &args.tasks {
        if !exp.suite.tasks.iter().any(|t| &t.task_id == id) {
            return Err(AtmError::config(format!("unknown task {id:?}")));
        }
    }
    let mut scores = Vec::new();
    for task in &exp.suite.tasks {
        if !args.tasks.is_empty() && !args.tasks.contains(&task.task_id) {
            continue;
        }
        let cfg = exp.task_finetune_config(&task.task_id, epochs);
        let model = finetune(start.clone(), task.train(), &cfg)?.with_label(format!("finetuned:{}", task.task_id));
        s.save_model(&model, &s.path(&format!("finetuned/{}.atmc", task.task_id)))?;
        let test = task.test();
        scores.push((task.task_id.clone(), evaluate_accuracy(&model, test)?, loss(&model, test)?));
    }
    let meta = RowMeta {
        method: "finetuned",
        alpha: None,
        aggregator: "none",
        iterations: 1,
        epochs_per_iteration: epochs,
    };
    s.emit("finetuned", &score_rows(s, meta, &scores), true)
}

#[derive(Serialize)]
struct MergeSummary {
    aggregator: String,
    alpha: f64,
    /// Task ids joined with `;`.
    tasks: String,
    param_count: usize,
    output: String,
    config_hash: String,
}

/// Task id of a checkpoint passed to `merge`: its file stem.
fn stem_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn merge_cmd(s: &Session, args: &MergeArgs) -> Result<()> {
    let base = load_checkpoint(&args.base)?;
    let mut vectors = Vec::with_capacity(args.models.len());
    for path in &args.models {
        let model = load_checkpoint(path)?;
        vectors.push(compute_task_vector(model, &base, stem_id(path), 0)?);
    }
    let mut tasks: Vec<String> = vectors.iter().map(|v| v.task_id.clone()).collect();
    tasks.sort();
    let kind = AggregatorKind::from(args.aggregator);
    let merged = if kind == AggregatorKind::SumTa {
        merge_task_arithmetic(base, vectors, args.alpha)?
    } else {
        let agg = Aggregator {
            seed: derive_seed(s.config.root_seed, "aggregator", 0),
            ..Aggregator::new(kind)
        };
        agg.validate()?;
        let mtv = resolve(&agg, vectors)?;
        apply(base, &mtv, args.alpha)?
    };
    let merged = merged.with_label(format!("merged:{}", kind.name()));
    let output = args.output.clone().unwrap_or_else(|| s.path("merged.atmc"));
    s.save_model(&merged, &output)?;
    let summary = MergeSummary {
        aggregator: kind.name().into(),
        alpha: args.alpha,
        tasks: tasks.join(";"),
        param_count: merged.params().len(),
        output: output.display().to_string(),
        config_hash: s.config.hash(),
    };
    s.emit("merge", &[summary], true)
}

fn atm_run(s: &Session) -> Result<()> {
    let exp = s.experiment()?;
    let methods: Vec<_> = s
        .config
        .methods
        .iter()
        .filter(|m| matches!(m.kind, MethodKind::PaAtm { .. } | MethodKind::PhAtm { .. }))
        .collect();
    if methods.is_empty() {
        return Err(AtmError::config("config has no pa_atm or ph_atm methods"));
    }
    let mut cache = FinetuneCache::default();
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for method in methods {
        s.note(format!("running {}", method.name));
        let outcome = exp.run_method(method, s.config.budget_epochs, None, &mut cache)?;
        if let Some(model) = &outcome.model {
            s.save_model(model, &s.path(&format!("models/{}.atmc", method.name)))?;
        }
        trace.extend(exp.iteration_rows(&method.name, &outcome.trace));
        rows.extend(outcome.rows);
    }
    s.emit("iterations", &trace, false)?;
    s.emit("results", &rows, true)
}

fn compare(s: &Session) -> Result<()> {
    let exp = s.experiment()?;
    let cmp = exp.baseline_comparison()?;
    let trace: Vec<_> = cmp
        .traces
        .iter()
        .flat_map(|(name, t)| exp.iteration_rows(name, t))
        .collect();
    s.emit("iterations", &trace, false)?;
    s.emit("results", &cmp.rows, true)
}

fn sweep_budget(s: &Session, budgets: Option<Vec<usize>>) -> Result<()> {
    let budgets = budgets.unwrap_or_else(|| s.config.budgets.clone());
    let sweep = s.experiment()?.budget_sweep(&budgets)?;
    s.emit("flatness", &sweep.flatness, false)?;
    s.emit("budget_sweep", &sweep.rows, true)
}

fn sweep_distribution(s: &Session, total: Option<usize>, options: Option<Vec<usize>>) -> Result<()> {
    let total = total.unwrap_or(s.config.distribution.total_epochs);
    let options = options.unwrap_or_else(|| s.config.distribution.iteration_options.clone());
    let rows = s.experiment()?.distribution_sweep(total, &options)?;
    s.emit("distribution_sweep", &rows, true)
}

#[derive(Serialize)]
struct TaskReport<'a> {
    task: &'a str,
    #[serde(flatten)]
    report: &'a atm_core::theory::EquivalenceReport,
}

fn check_lemma(s: &Session, task: Option<&str>) -> Result<()> {
    let exp = s.experiment()?;
    let (per_task, multitask) = exp.lemma_check()?;
    let report = match task {
        Some(id) => {
            &per_task
                .iter()
                .find(|(t, _)| t == id)
                .ok_or_else(|| AtmError::config(format!("unknown task {id:?}")))?
                .1
        }
        None => &multitask,
    };
    let tasks: Vec<TaskReport<'_>> = per_task.iter().map(|(t, r)| TaskReport { task: t, report: r }).collect();
    let format = s.format.unwrap_or(Format::Json);
    let text = match format {
        Format::Json => to_json(report)?,
        Format::Csv => encode(std::slice::from_ref(report), Format::Csv)?,
    };
    let path = s.path(&format!("lemma.{}", format.extension()));
    write_text(&path, &text)?;
    s.note(format!("wrote {}", path.display()));
    let tasks_path = s.path(&format!("lemma_tasks.{}", format.extension()));
    write_text(&tasks_path, &encode(&tasks, format)?)?;
    s.note(format!("wrote {}", tasks_path.display()));
    if !s.quiet {
        print!("{text}");
    }
    if !report.passed {
        return Err(AtmError::CheckFailed {
            residual: report.max_norm_residual,
            tolerance: report.tolerance,
        });
    }
    Ok(())
}

fn eval(s: &Session, args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let suite = build_suite(&s.config)?;
    let scores = evaluate_on_test(&model, &suite)?;
    let label = if model.label.is_empty() {
        stem_id(&args.model)
    } else {
        model.label.clone()
    };
    let meta = RowMeta {
        method: &label,
        alpha: None,
        aggregator: "none",
        iterations: 0,
        epochs_per_iteration: 0,
    };
    s.emit("eval", &score_rows(s, meta, &scores), true)
}
