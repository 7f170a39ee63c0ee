use atm_core::numeric::{
    evaluate_accuracy, finetune, gd_step, gradient, init_model, loss, loss_and_gradient, relative_l2, Activation,
    ArchSpec, BatchSize, LabeledBatch, TrainConfig,
};
use atm_core::seed::rng_from_seed;
use atm_core::theory::{finite_diff_gradient, DEFAULT_FD_STEP};
use atm_core::{AtmError, ModelState, ModelStateF32};
use proptest::prelude::*;
use rand::Rng;

fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> LabeledBatch<f64> {
    let mut rng = rng_from_seed(seed);
    let features = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::new(dim, features, labels).unwrap()
}

/// Initialized model with every parameter jittered, so no ReLU
/// pre-activation sits exactly on the kink at zero.
fn generic_model(arch: &ArchSpec, seed: u64) -> ModelState {
    let mut model: ModelState = init_model(arch, seed).unwrap();
    let mut rng = rng_from_seed(!seed);
    for p in model.params_mut().iter_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    model
}

fn arch_strategy() -> impl Strategy<Value = ArchSpec> {
    (
        1usize..=5,
        prop::collection::vec(1usize..=6, 0..=2),
        2usize..=4,
        prop_oneof![Just(Activation::Tanh), Just(Activation::Relu)],
    )
        .prop_map(|(input, hidden, classes, act)| {
            let mut widths = vec![input];
            widths.extend(hidden);
            widths.push(classes);
            ArchSpec::new(widths, act).unwrap()
        })
        .prop_filter("at most 200 parameters", |a| a.param_count() <= 200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backprop_matches_central_differences(arch in arch_strategy(), seed in any::<u64>(), n in 1usize..12) {
        let model = generic_model(&arch, seed);
        let data = random_batch(arch.input_dim(), arch.class_count(), n, seed ^ 0xabcd);
        let analytic = gradient(&model, &data).unwrap();
        let numeric = finite_diff_gradient(&model, &data, DEFAULT_FD_STEP).unwrap();
        let err = relative_l2(&analytic.values, &numeric.values);
        prop_assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn small_step_along_negative_gradient_lowers_loss(arch in arch_strategy(), seed in any::<u64>()) {
        let model: ModelState = init_model(&arch, seed).unwrap();
        let data = random_batch(arch.input_dim(), arch.class_count(), 16, seed.wrapping_add(1));
        let (before, g) = loss_and_gradient(&model, &data).unwrap();
        prop_assume!(g.l2_norm() > 1e-6);
        let stepped = gd_step(model, &g, 1e-2).unwrap();
        let after = loss(&stepped, &data).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn single_example_batch_duplicated_has_same_gradient(arch in arch_strategy(), seed in any::<u64>()) {
        let model: ModelState = init_model(&arch, seed).unwrap();
        let one = random_batch(arch.input_dim(), arch.class_count(), 1, seed);
        let twice = LabeledBatch::concat(arch.input_dim(), [&one, &one]).unwrap();
        let a = gradient(&model, &one).unwrap();
        let b = gradient(&model, &twice).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn init_depends_only_on_arch_and_seed() {
    let arch = ArchSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
    let a: ModelState = init_model(&arch, 7).unwrap();
    let b: ModelState = init_model(&arch, 7).unwrap();
    let c: ModelState = init_model(&arch, 8).unwrap();
    assert_eq!(a.params().as_slice(), b.params().as_slice());
    assert_ne!(a.params().as_slice(), c.params().as_slice());
    assert_eq!(a.params().len(), 4 * 8 + 8 + 8 * 3 + 3);
}

#[test]
fn empty_batch_and_bad_labels_are_rejected() {
    let arch = ArchSpec::new(vec![2, 3], Activation::Tanh).unwrap();
    let model: ModelState = init_model(&arch, 0).unwrap();
    let empty = LabeledBatch::empty(2);
    assert!(matches!(gradient(&model, &empty), Err(AtmError::Empty(_))));
    assert!(LabeledBatch::new(2, vec![0.0; 3], vec![0]).is_err());
    let bad = LabeledBatch::new(2, vec![0.0, 1.0], vec![5]).unwrap();
    assert!(matches!(loss(&model, &bad), Err(AtmError::Label { label: 5, classes: 3 })));
    let wrong_dim = random_batch(3, 3, 2, 0);
    assert!(matches!(loss(&model, &wrong_dim), Err(AtmError::Shape { .. })));
}

#[test]
fn negative_learning_rate_is_rejected() {
    let arch = ArchSpec::new(vec![2, 2], Activation::Tanh).unwrap();
    let model: ModelState = init_model(&arch, 0).unwrap();
    let data = random_batch(2, 2, 4, 0);
    let g = gradient(&model, &data).unwrap();
    assert!(gd_step(model, &g, -0.1).is_err());
}

#[test]
fn finetune_is_deterministic_and_learns() {
    let arch = ArchSpec::new(vec![4, 12, 3], Activation::Tanh).unwrap();
    let mut rng = rng_from_seed(3);
    let mut data = LabeledBatch::empty(4);
    for _ in 0..300 {
        let label = rng.random_range(0..3);
        let row: Vec<f64> = (0..4)
            .map(|j| if j == label { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
            .collect();
        data.push(&row, label);
    }
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.1,
        batch_size: BatchSize::Mini(16),
        seed: 11,
        shuffle: true,
    };
    let start: ModelState = init_model(&arch, 1).unwrap();
    let before = evaluate_accuracy(&start, &data).unwrap();
    let a = finetune(start.clone(), &data, &cfg).unwrap();
    let b = finetune(start, &data, &cfg).unwrap();
    assert_eq!(a.params().as_slice(), b.params().as_slice());
    let after = evaluate_accuracy(&a, &data).unwrap();
    assert!(after > 0.9 && after > before, "{before} -> {after}");
}

#[test]
fn single_precision_models_train() {
    let arch = ArchSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
    let model: ModelStateF32 = init_model(&arch, 2).unwrap();
    let data = random_batch(3, 2, 20, 4).cast::<f32>();
    let (before, g) = loss_and_gradient(&model, &data).unwrap();
    let after = loss(&gd_step(model, &g, 1e-2).unwrap(), &data).unwrap();
    assert!(after < before);
    let numeric = finite_diff_gradient(&init_model::<f32>(&arch, 2).unwrap(), &data, 1e-2).unwrap();
    assert!(relative_l2(&g.values, &numeric.values) < 1e-2);
}
