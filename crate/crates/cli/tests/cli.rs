use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atm_core::harness::checkpoint::checkpoint_bytes;
use atm_core::harness::{load_checkpoint, ExperimentConfig};
use atm_core::merge::merge_task_arithmetic;
use atm_core::task_vector::compute_task_vector;

fn atm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> &'static str {
    let mut cfg = ExperimentConfig::default_experiment();
    if let atm_core::harness::SuiteSource::Spec(spec) = &mut cfg.suite {
        spec.samples_per_task = 300;
    }
    cfg.budget_epochs = 2;
    fs::write(dir.join("c.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    "c.json"
}

#[test]
fn missing_config_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = atm(&["--config", "missing-config.json", "atm", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing-config.json"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = atm(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let help = atm(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"suite\": 3}").unwrap();
    let o = atm(&["--config", "bad.json", "compare"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.json"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.atmc"), b"ATMCKPT1\x01\x00").unwrap();
    let o = atm(&["eval", "--model", "broken.atmc"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn check_lemma_prints_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = atm(&["check", "lemma", "--config", cfg, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["regime"], "full_batch_1epoch");
    assert!(report["max_norm_residual"].as_f64().unwrap() <= 1e-12);
    assert!(dir.path().join("o/lemma.json").exists());
    assert!(dir.path().join("o/lemma_tasks.json").exists());
}

#[test]
fn merge_matches_in_process_task_arithmetic_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for args in [
        &["pretrain", "--config", cfg, "--out", "o", "--quiet"][..],
        &["finetune", "--config", cfg, "--out", "o", "--quiet"][..],
    ] {
        let o = atm(args, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = atm(
        &[
            "merge", "--out", "o", "--quiet", "--alpha", "0.3", "--base", "o/pretrained.atmc",
            "o/finetuned/task2.atmc", "o/finetuned/task0.atmc", "o/finetuned/task1.atmc", "o/finetuned/task3.atmc",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let base = load_checkpoint(dir.path().join("o/pretrained.atmc")).unwrap();
    let vectors = (0..4)
        .map(|i| {
            let id = format!("task{i}");
            let m = load_checkpoint(dir.path().join(format!("o/finetuned/{id}.atmc"))).unwrap();
            compute_task_vector(m, &base, id, 0).unwrap()
        })
        .collect();
    let expected = merge_task_arithmetic(base, vectors, 0.3).unwrap();
    let written = load_checkpoint(dir.path().join("o/merged.atmc")).unwrap();
    let bits = |m: &atm_core::ModelState| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&written), bits(&expected));
    let written_bytes = fs::read(dir.path().join("o/merged.atmc")).unwrap();
    assert_eq!(written_bytes, checkpoint_bytes(&expected.with_label("merged:sum_ta")).unwrap());
}

#[test]
fn eval_of_pretrained_matches_pretrain_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = atm(&["pretrain", "--config", cfg, "--out", "o"], dir.path());
    assert!(p.status.success());
    let e = atm(&["eval", "--config", cfg, "--out", "o", "--model", "o/pretrained.atmc"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(p.stdout, e.stdout);
    let header = String::from_utf8(p.stdout).unwrap();
    assert!(header.starts_with(
        "method,task,split,accuracy,loss,alpha,aggregator,iterations,epochs_per_iteration,seed,config_hash\n"
    ));
}

#[test]
fn seed_flag_changes_results_and_json_format_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = atm(&["atm", "run", "--config", cfg, "--out", "a", "--seed", "1", "--format", "json"], dir.path());
    let b = atm(&["atm", "run", "--config", cfg, "--out", "b", "--seed", "2", "--format", "json"], dir.path());
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
    let rows: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(rows.iter().all(|r| r["seed"] == 1));
    assert!(dir.path().join("a/models/PA-ATM.atmc").exists());
    assert!(dir.path().join("a/iterations.json").exists());
}

#[test]
fn documented_configs_match_the_default_experiment() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
    let full = ExperimentConfig::load(docs.join("default-config.json")).unwrap();
    assert_eq!(full, ExperimentConfig::default_experiment());

    let text = fs::read_to_string(docs.join("config.md")).unwrap();
    let start = text.find("```json").unwrap() + "```json".len();
    let end = start + text[start..].find("```").unwrap();
    let annotated: ExperimentConfig = serde_json::from_str(&text[start..end]).unwrap();
    assert_eq!(annotated, ExperimentConfig::default_experiment());
}
