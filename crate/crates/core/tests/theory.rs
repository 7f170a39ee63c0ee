use atm_core::numeric::{init_model, Activation, ArchSpec};
use atm_core::synth::generate_task_suite;
use atm_core::theory::{
    check_multitask_vector_is_average_gradient, check_task_vector_is_scaled_gradient, Regime, EXACT_TOLERANCE,
};
use atm_core::{ModelState, SuiteSpec, TaskSuite};

fn small_spec(seed: u64) -> SuiteSpec {
    SuiteSpec {
        samples_per_task: 200,
        feature_dim: 6,
        class_count: 3,
        seed,
        ..SuiteSpec::default()
    }
}

fn arch() -> ArchSpec {
    ArchSpec::new(vec![6, 8, 3], Activation::Tanh).unwrap()
}

#[test]
fn multitask_identity_on_four_tasks() {
    let suite: TaskSuite = generate_task_suite(&SuiteSpec::default()).unwrap();
    assert_eq!(suite.len(), 4);
    let arch = ArchSpec::new(vec![16, 32, 4], Activation::Relu).unwrap();
    let base: ModelState = init_model(&arch, 5).unwrap();
    let report = check_multitask_vector_is_average_gradient(&base, &suite, 0.1, EXACT_TOLERANCE).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.regime, "full_batch_1epoch");
}

/// Mean relative residual across seeds for each regime.
fn mean_residual(regime: &Regime, seeds: u64) -> f64 {
    let mut total = 0.0;
    for seed in 0..seeds {
        let suite: TaskSuite = generate_task_suite(&small_spec(seed)).unwrap();
        let base: ModelState = init_model(&arch(), seed).unwrap();
        let report = check_task_vector_is_scaled_gradient(&base, suite.tasks[0].train(), 0.1, regime, EXACT_TOLERANCE).unwrap();
        total += report.relative_residual;
    }
    total / seeds as f64
}

#[test]
fn residual_grows_outside_the_exact_regime() {
    let seeds = 20;
    let exact = mean_residual(&Regime::FullBatch1Epoch, seeds);
    assert!(exact < 1e-12, "{exact}");
    let by_epochs: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&epochs| mean_residual(&Regime::MultiEpoch { epochs }, seeds))
        .collect();
    assert!(by_epochs[0] > 1e-6);
    assert!(by_epochs.windows(2).all(|w| w[1] > w[0]), "{by_epochs:?}");
    let minibatch = mean_residual(&Regime::Minibatch { batch_size: 16, seed: 1 }, seeds);
    assert!(minibatch > 1e-3, "{minibatch}");
}
