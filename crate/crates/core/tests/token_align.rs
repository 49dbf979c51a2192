use dyns_core::data::Label;
use dyns_core::gradcheck::check_store;
use dyns_core::token_align::{
    classify, compress_tokens, lora_linear, numerical_rank, BrainCompressor, ForwardCtx, LoraAdapter, LoraConfig, LoraWeights,
    Pooling, SurrogateConfig, SurrogateModel,
};
use dyns_core::train::cross_entropy_var;
use dyns_core::{Error, Graph, ParamStore, Role, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn compressor(tokens: usize, d_h: usize, d_k: usize, seed: u64) -> (ParamStore, BrainCompressor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = BrainCompressor::new(&mut store, "align", tokens, d_h, d_k, false, &mut rng).unwrap();
    *store.value_mut(c.proj_b) = Tensor::normal(vec![d_k], 0.5, &mut rng);
    (store, c)
}

fn small_surrogate(seed: u64) -> (ParamStore, SurrogateModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = SurrogateConfig {
        d_k: 16,
        blocks: 2,
        heads: 4,
        vocab: 12,
        ffn_mult: 2,
        context_cap: 24,
    };
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.1,
        ..LoraConfig::default()
    };
    let model = SurrogateModel::new(&mut store, cfg, lora, &mut rng).unwrap();
    // A live head, so logits depend on the stack.
    *store.value_mut(model.head_w) = Tensor::normal(vec![2, 16], 1.0, &mut rng);
    *store.value_mut(model.head_b) = Tensor::normal(vec![2], 1.0, &mut rng);
    (store, model)
}

fn logits(store: &ParamStore, model: &SurrogateModel, z: &Tensor, prompt: &[usize], adapters: bool) -> Tensor {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let zv = g.constant(z.clone());
    let mut ctx = ForwardCtx { adapters, ..ForwardCtx::eval() };
    let out = model.forward(&mut g, &b, store, Some(zv), prompt, &mut ctx).unwrap();
    g.value(out).clone()
}

fn randomize_adapters(store: &mut ParamStore, model: &SurrogateModel, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.adapters().map(|a| a.b).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::normal(shape, 0.5, rng);
    }
}

#[test]
fn compression_matches_explicit_attention() {
    let (store, c) = compressor(4, 6, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Tensor::normal(vec![11, 6], 1.0, &mut rng);
    let z = compress_tokens(&c, &store, &s, None, Pooling::Attention).unwrap().z;
    assert_eq!(z.shape(), &[4, 5]);

    let q = store.value(c.queries);
    let w = store.value(c.proj_w);
    let b = store.value(c.proj_b);
    for k in 0..4 {
        let scores: Vec<f64> = (0..11)
            .map(|t| (0..6).map(|i| q.at2(k, i) * s.at2(t, i)).sum::<f64>() / 6f64.sqrt())
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = scores.iter().map(|v| (v - top).exp()).sum();
        let pooled: Vec<f64> = (0..6)
            .map(|i| (0..11).map(|t| (scores[t] - top).exp() / z_sum * s.at2(t, i)).sum())
            .collect();
        for o in 0..5 {
            let want = b.data()[o] + (0..6).map(|i| w.at2(o, i) * pooled[i]).sum::<f64>();
            assert!((z.at2(k, o) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

#[test]
fn uniform_pooling_with_identity_projection_is_the_mean() {
    let (mut store, c) = compressor(1, 4, 4, 3);
    *store.value_mut(c.proj_w) = Tensor::eye(4);
    *store.value_mut(c.proj_b) = Tensor::zeros(vec![4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Tensor::normal(vec![9, 4], 1.0, &mut rng);
    let z = compress_tokens(&c, &store, &s, None, Pooling::Uniform).unwrap().z;
    for i in 0..4 {
        let mean = (0..9).map(|t| s.at2(t, i)).sum::<f64>() / 9.0;
        assert!((z.at2(0, i) - mean).abs() < 1e-12);
    }
}

#[test]
fn single_state_gives_identical_tokens() {
    let (store, c) = compressor(5, 3, 4, 5);
    let s = Tensor::from_rows(&[vec![0.4, -1.1, 2.0]]).unwrap();
    let z = compress_tokens(&c, &store, &s, None, Pooling::Attention).unwrap().z;
    let w = store.value(c.proj_w);
    let b = store.value(c.proj_b);
    for o in 0..4 {
        let want = b.data()[o] + (0..3).map(|i| w.at2(o, i) * s.at2(0, i)).sum::<f64>();
        for k in 0..5 {
            assert!((z.at2(k, o) - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn token_count_is_fixed_and_padding_is_ignored(seed in any::<u64>(), len in 1usize..40, pad in 1usize..20) {
        let (store, c) = compressor(3, 4, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let s = Tensor::normal(vec![len, 4], 1.0, &mut rng);
        let z = compress_tokens(&c, &store, &s, None, Pooling::Attention).unwrap().z;
        prop_assert_eq!(z.shape(), &[3, 6]);

        let mut rows: Vec<Vec<f64>> = (0..len).map(|t| s.row(t).to_vec()).collect();
        rows.extend((0..pad).map(|_| Tensor::normal(vec![4], 10.0, &mut rng).into_data()));
        let keep: Vec<bool> = (0..len + pad).map(|t| t < len).collect();
        let padded = Tensor::from_rows(&rows).unwrap();
        let zp = compress_tokens(&c, &store, &padded, Some(&keep), Pooling::Attention).unwrap().z;
        prop_assert!(zp.max_abs_diff(&z) < 1e-12);
    }
}

#[test]
fn fresh_adapter_is_the_frozen_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = LoraConfig { rank: 3, alpha: 6.0, dropout: 0.0, ..LoraConfig::default() };
    let w = Tensor::normal(vec![5, 7], 1.0, &mut rng);
    let adapter = LoraWeights::new(7, 5, &cfg, &mut rng).unwrap();
    let x = Tensor::normal(vec![4, 7], 1.0, &mut rng);
    let y = lora_linear(&x, &w, &adapter, false, &mut rng).unwrap();
    assert_eq!(y, x.matmul_bt(&w).unwrap());
}

#[test]
fn hand_low_rank_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let adapter = LoraWeights {
        a: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        b: Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
        rank: 1,
        alpha: 1.0,
        dropout: 0.0,
    };
    let x = Tensor::vector(vec![3.0, 7.0]).unwrap();
    let y = lora_linear(&x, &Tensor::zeros(vec![2, 2]), &adapter, false, &mut rng).unwrap();
    assert_eq!(y.data(), &[3.0, 0.0]);
}

#[test]
fn doubling_alpha_doubles_the_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Tensor::normal(vec![4, 6], 1.0, &mut rng);
    let x = Tensor::normal(vec![6], 1.0, &mut rng);
    let mut adapter = LoraWeights {
        a: Tensor::normal(vec![2, 6], 1.0, &mut rng),
        b: Tensor::normal(vec![4, 2], 1.0, &mut rng),
        rank: 2,
        alpha: 3.0,
        dropout: 0.5,
    };
    let base = w.matvec(&x).unwrap();
    let d1 = lora_linear(&x, &w, &adapter, false, &mut rng).unwrap().sub(&base).unwrap();
    adapter.alpha = 6.0;
    let d2 = lora_linear(&x, &w, &adapter, false, &mut rng).unwrap().sub(&base).unwrap();
    assert!(d2.max_abs_diff(&d1.scale(2.0)) < 1e-12);
}

#[test]
fn rank_above_width_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = LoraConfig { rank: 5, ..LoraConfig::default() };
    assert!(matches!(LoraWeights::new(4, 8, &cfg, &mut rng), Err(Error::Config(_))));
}

#[test]
fn adapter_delta_rank_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for rank in 1..=4 {
        let mut store = ParamStore::new();
        let cfg = LoraConfig { rank, alpha: 2.0 * rank as f64, ..LoraConfig::default() };
        let adapter = LoraAdapter::new(&mut store, "t", 12, 10, &cfg, &mut rng).unwrap();
        assert_eq!(store.value(adapter.b).max_abs(), 0.0);
        assert_eq!(numerical_rank(&adapter.delta_weight(&store), 1e-10), 0);
        *store.value_mut(adapter.b) = Tensor::normal(vec![10, rank], 1.0, &mut rng);
        assert_eq!(numerical_rank(&adapter.delta_weight(&store), 1e-10), rank);
    }
}

#[test]
fn fresh_adapters_do_not_move_logits() {
    let (store, model) = small_surrogate(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let z = Tensor::normal(vec![6, 16], 1.0, &mut rng);
        let on = logits(&store, &model, &z, &[1, 4, 2], true);
        let off = logits(&store, &model, &z, &[1, 4, 2], false);
        assert!(on.max_abs_diff(&off) <= 1e-15, "{on:?} vs {off:?}");
    }
}

#[test]
fn evaluation_forward_is_deterministic() {
    let (store, model) = small_surrogate(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = Tensor::normal(vec![4, 16], 1.0, &mut rng);
    let a = logits(&store, &model, &z, &[3, 3, 7], true);
    let b = logits(&store, &model, &z, &[3, 3, 7], true);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn brain_token_order_does_not_matter() {
    let (mut store, model) = small_surrogate(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    randomize_adapters(&mut store, &model, &mut rng);
    let z = Tensor::normal(vec![5, 16], 1.0, &mut rng);
    let rows: Vec<Vec<f64>> = [3, 0, 4, 1, 2].iter().map(|&r| z.row(r).to_vec()).collect();
    let zp = Tensor::from_rows(&rows).unwrap();
    let a = logits(&store, &model, &z, &[2, 9], true);
    let b = logits(&store, &model, &zp, &[2, 9], true);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn context_overflow_is_a_length_error() {
    let (store, model) = small_surrogate(17);
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let z = g.constant(Tensor::zeros(vec![20, 16]));
    let err = model.forward(&mut g, &b, &store, Some(z), &[1, 2, 3, 4, 5], &mut ForwardCtx::eval()).unwrap_err();
    assert!(matches!(err, Error::ContextOverflow { len: 25, cap: 24 }));
}

#[test]
fn adapter_and_head_gradients_match_finite_differences() {
    let (mut store, model) = small_surrogate(18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    randomize_adapters(&mut store, &model, &mut rng);
    let z = Tensor::normal(vec![3, 16], 1.0, &mut rng);
    let rep = check_store(
        &store,
        |g, b| {
            let zv = g.constant(z.clone());
            let out = model.forward(g, b, &store, Some(zv), &[5, 1], &mut ForwardCtx::eval())?;
            cross_entropy_var(g, out, Label::Tc)
        },
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    let trainable: usize = store.iter().filter(|(_, p)| p.role == Role::Trainable).map(|(_, p)| p.value.len()).sum();
    assert_eq!(rep.coordinates, trainable);
}

#[test]
fn classify_cases() {
    assert_eq!(classify(&Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap(), (Label::Tc, 0.5));

    let (label, conf) = classify(&Tensor::vector(vec![58f64.ln(), 42f64.ln()]).unwrap()).unwrap();
    assert_eq!(label, Label::Asd);
    assert!((conf - 0.58).abs() < 1e-12);

    let (label, conf) = classify(&Tensor::vector(vec![-5.0, 5.0]).unwrap()).unwrap();
    assert_eq!(label, Label::Tc);
    let oracle = 1.0 / (1.0 + (-10f64).exp());
    assert!((conf - oracle).abs() < 1e-15);
    assert!((conf - 0.9999546).abs() < 1e-7);
}
