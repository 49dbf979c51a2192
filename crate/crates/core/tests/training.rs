use dyns_core::data::{split_dataset, synth_generate};
use dyns_core::gradcheck::{finite_diff_check, DEFAULT_EPS};
use dyns_core::model::ModelConfig;
use dyns_core::train::{
    adam_step, cross_entropy_var, evaluate, f1_score, normalize_all, run_variant, train, AdamState, Metrics, TrainConfig,
};
use dyns_core::{Error, Graph, Label, ParamStore, Pipeline, Role, ScanBackend, SynthSpec, Tensor, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_lat: 8,
        conv_channels: 2,
        encoder_heads: 2,
        d_h: 6,
        tokens: 3,
        d_k: 8,
        surrogate_heads: 2,
        vocab: 12,
        context_cap: 16,
        rank: 2,
        alpha: 4.0,
        prompt: vec![1, 2, 3],
        ..ModelConfig::default()
    }
}

fn tiny_data(seed: u64) -> Vec<dyns_core::RoiTimeSeries> {
    normalize_all(&synth_generate(&SynthSpec::planted(8, 24, 6, 0.6, seed)).unwrap()).unwrap()
}

#[test]
fn paper_f1_is_consistent() {
    assert!((f1_score(0.8022, 0.6102) - 0.6931).abs() < 5e-4);
}

#[test]
fn balanced_confusion_matrix() {
    let m = Metrics::from_counts(8, 2, 2, 8);
    for v in [m.accuracy, m.precision, m.recall, m.f1] {
        assert!((v - 0.8).abs() < 1e-15);
    }
}

#[test]
fn all_negative_predictor() {
    let pairs = (0..10).map(|i| (if i < 5 { Label::Asd } else { Label::Tc }, Label::Tc));
    let m = Metrics::from_pairs(pairs);
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.0, 0.0, 0.0));
}

proptest! {
    #[test]
    fn metric_identities(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
        let m = Metrics::from_counts(tp, fp, fn_, tn);
        let total = (tp + fp + fn_ + tn) as f64;
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        prop_assert_eq!(m.accuracy, div((tp + tn) as f64, total));
        prop_assert_eq!(m.precision, div(tp as f64, (tp + fp) as f64));
        prop_assert_eq!(m.recall, div(tp as f64, (tp + fn_) as f64));
        prop_assert_eq!(m.f1, div(2.0 * m.precision * m.recall, m.precision + m.recall));
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for label in Label::ALL {
        let logits = Tensor::normal(vec![2], 2.0, &mut rng);
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let loss = cross_entropy_var(&mut g, l, label).unwrap();
        let grad = g.backward(loss).unwrap().wrt(l);
        let p = logits.softmax_rows();
        for k in 0..2 {
            let onehot = if k == label.index() { 1.0 } else { 0.0 };
            assert!((grad.data()[k] - (p.data()[k] - onehot)).abs() < 1e-15);
        }
        let rep = finite_diff_check(|g, v| cross_entropy_var(g, v[0], label), &[logits], DEFAULT_EPS, None).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }
}

fn single_param_store(value: Tensor) -> ParamStore {
    let mut store = ParamStore::new();
    store.trainable("w", value);
    store.frozen("f", Tensor::ones(vec![2]));
    store
}

#[test]
fn first_adam_step_moves_each_coordinate_by_lr() {
    let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
    let w0 = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let mut store = single_param_store(w0.clone());
    let mut state = AdamState::new(&store);
    let grads = vec![Tensor::vector(vec![3.0, -0.2, 1e-3, 50.0]).unwrap(), Tensor::zeros(vec![2])];
    adam_step(&mut store, &grads, &mut state, &cfg, |_| true).unwrap();
    let w = store.value(store.id("w").unwrap());
    for (k, (a, b)) in w.data().iter().zip(w0.data()).enumerate() {
        let g = grads[0].data()[k];
        let want = -cfg.learning_rate * g / (g.abs() + cfg.eps);
        assert!(((a - b) - want).abs() < 1e-15);
    }
    assert_eq!(store.value(store.id("f").unwrap()), &Tensor::ones(vec![2]));
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let cfg = TrainConfig::default();
    let w0 = Tensor::vector(vec![0.5, -1.0]).unwrap();
    let mut store = single_param_store(w0.clone());
    let mut state = AdamState::new(&store);
    for _ in 0..5 {
        adam_step(&mut store, &[Tensor::zeros(vec![2]), Tensor::zeros(vec![2])], &mut state, &cfg, |_| true).unwrap();
    }
    assert_eq!(store.value(store.id("w").unwrap()), &w0);
}

#[test]
fn non_finite_values_are_rejected_at_creation() {
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    assert!(Tensor::new(vec![2], vec![0.0, f64::INFINITY]).is_err());
}

#[test]
fn accumulation_matches_one_large_batch() {
    let data = tiny_data(2);
    let (train_set, val_set) = (&data[..8], &data[8..]);
    let model = Pipeline::new(tiny_model(), Variant::full(), 8, 3).unwrap();
    let whole = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-2, ..TrainConfig::desk(3) };
    let a = train(model.clone(), train_set, val_set, &whole, None, |_| {}).unwrap();
    for k in [2, 4] {
        let split = TrainConfig { batch_size: 4 / k, accumulation_steps: k, ..whole.clone() };
        let b = train(model.clone(), train_set, val_set, &split, None, |_| {}).unwrap();
        assert_eq!(a.best_epoch, b.best_epoch);
        for ((_, p), (_, q)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert!(p.value.max_abs_diff(&q.value) <= 1e-12, "k={k} {}", p.name);
        }
    }
}

#[test]
fn frozen_variant_matches_full_before_training() {
    let data = tiny_data(4);
    let full = Pipeline::new(tiny_model(), Variant::full(), 8, 5).unwrap();
    let frozen = Pipeline::new(tiny_model(), "frozen_llm".parse().unwrap(), 8, 5).unwrap();
    for s in &data {
        let a = full.logits(&s.values, ScanBackend::Sequential, 0).unwrap();
        let b = frozen.logits(&s.values, ScanBackend::Sequential, 0).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn training_never_touches_frozen_weights() {
    let subjects = synth_generate(&SynthSpec::planted(8, 24, 8, 0.6, 6)).unwrap();
    let split = split_dataset(&subjects, 0.8, 6).unwrap();
    let fresh = Pipeline::new(tiny_model(), Variant::full(), 8, 6).unwrap();
    let before = fresh.store.checksum(Role::Frozen);
    let trainable_before = fresh.store.checksum(Role::Trainable);
    let cfg = TrainConfig { epochs: 2, learning_rate: 1e-2, ..TrainConfig::desk(6) };
    let run = run_variant(Variant::full(), &split, &tiny_model(), &cfg, None, |_| {}).unwrap();
    assert_eq!(run.model.store.checksum(Role::Frozen), before);
    assert_ne!(run.model.store.checksum(Role::Trainable), trainable_before);
}

#[test]
fn frozen_variant_keeps_adapters_at_init() {
    let subjects = synth_generate(&SynthSpec::planted(8, 24, 8, 0.6, 7)).unwrap();
    let split = split_dataset(&subjects, 0.8, 7).unwrap();
    let cfg = TrainConfig { epochs: 2, learning_rate: 1e-2, ..TrainConfig::desk(7) };
    let variant: Variant = "frozen_llm".parse().unwrap();
    let run = run_variant(variant, &split, &tiny_model(), &cfg, None, |_| {}).unwrap();
    let fresh = Pipeline::new(tiny_model(), variant, 8, 7).unwrap();
    for ((_, p), (_, q)) in run.model.store.iter().zip(fresh.store.iter()) {
        if p.name.starts_with("lora.") {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
}

#[test]
fn fixed_seed_runs_are_identical() {
    let subjects = synth_generate(&SynthSpec::planted(8, 24, 8, 0.6, 8)).unwrap();
    let split = split_dataset(&subjects, 0.8, 8).unwrap();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk(8) };
    let a = run_variant(Variant::full(), &split, &tiny_model(), &cfg, None, |_| {}).unwrap();
    let b = run_variant(Variant::full(), &split, &tiny_model(), &cfg, None, |_| {}).unwrap();
    assert_eq!(a.test, b.test);
    assert_eq!(a.log, b.log);
}

#[test]
fn empty_split_cannot_be_evaluated() {
    let model = Pipeline::new(tiny_model(), Variant::full(), 8, 0).unwrap();
    assert!(matches!(evaluate(&model, &[], ScanBackend::Sequential), Err(Error::Evaluation(_))));
}

#[test]
fn unknown_variant_is_a_config_error() {
    assert!(matches!("backbone:lstm".parse::<Variant>(), Err(Error::Config(_))));
    assert!(matches!("sparse_graph".parse::<Variant>(), Err(Error::Config(_))));
}

#[test]
fn every_catalogue_variant_runs() {
    let subjects = synth_generate(&SynthSpec::planted(8, 24, 4, 0.6, 9)).unwrap();
    let split = split_dataset(&subjects, 0.75, 9).unwrap();
    let cfg = TrainConfig { epochs: 1, validation_fraction: 0.0, ..TrainConfig::desk(9) };
    for variant in Variant::catalogue() {
        let run = run_variant(variant, &split, &tiny_model(), &cfg, None, |_| {}).unwrap();
        assert_eq!(run.test.metrics.total(), split.test.len(), "{variant}");
        assert_eq!(variant.to_string().parse::<Variant>().unwrap(), variant);
    }
}

#[test]
fn default_config_trains_a_small_fraction() {
    let model = Pipeline::new(ModelConfig::default(), Variant::full(), 16, 0).unwrap();
    assert!(model.trainable_ratio() < 0.10, "{}", model.trainable_ratio());
}
