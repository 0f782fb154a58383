use cdnet_core::encoder::{FoundationProvider, StandIn};
use cdnet_core::model::{ChangeModel, ModelConfig};
use cdnet_core::objectives::{total_loss, LossConfig};
use cdnet_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(cfg: ModelConfig) -> ModelConfig {
    ModelConfig { width: 16, backbone_channels: [8, 16, 16, 16], heads: 2, provider_channels: 8, ..cfg }
}

fn images(seed: u64, b: usize, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * 3 * size * size;
    let mut draw = || Tensor::from_vec(&[b, 3, size, size], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (draw(), draw())
}

fn provider(channels: usize) -> (FoundationProvider, ParamStore<f32>) {
    let (s, store) = StandIn::build(99, channels).unwrap();
    (FoundationProvider::StandIn(s), store)
}

#[test]
fn outputs_have_full_resolution_for_every_variant() {
    let (a, b) = images(1, 2, 64);
    for (dffm, s2dt, lmm) in [(true, true, true), (false, true, true), (true, false, true), (true, true, false), (false, false, false)] {
        let cfg = small(ModelConfig { use_dffm: dffm, use_s2dt: s2dt, use_lmm: lmm, ..ModelConfig::default() });
        let (model, store) = ChangeModel::build(&cfg, 2).unwrap();
        let (p, ps) = provider(8);
        let g = Graph::new();
        let out = model.forward(&g, &store, &p, &ps, g.constant(a.clone()), g.constant(b.clone()), None).unwrap();
        assert_eq!(g.dims(out.logits), vec![2, 1, 64, 64]);
        for v in out.aux {
            assert_eq!(g.dims(v), vec![2, 1, 64, 64]);
        }
        let y = Tensor::zeros(&[2, 1, 64, 64]).unwrap();
        let loss = total_loss(&g, out.logits, &out.aux, &y, &LossConfig::default()).unwrap();
        assert!(g.value(loss.total).item().is_finite());
        if !lmm {
            assert_eq!(out.logits, out.aux[0]);
        }
    }
}

#[test]
fn default_model_is_desk_sized() {
    let (model, store) = ChangeModel::build(&ModelConfig::default(), 0).unwrap();
    assert!(model.lmm.is_some() && model.encoder.fusion.is_some());
    let n = store.num_trainable_elements();
    assert!(n > 500_000 && n < 5_000_000, "{n}");
}

#[test]
fn build_is_deterministic_in_the_seed() {
    let cfg = small(ModelConfig::default());
    let (_, a) = ChangeModel::build(&cfg, 5).unwrap();
    let (_, b) = ChangeModel::build(&cfg, 5).unwrap();
    let (_, c) = ChangeModel::build(&cfg, 6).unwrap();
    let same = |x: &ParamStore<f32>, y: &ParamStore<f32>| x.iter().zip(y.iter()).all(|((_, p), (_, q))| p.name == q.name && p.value == q.value);
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn vanishing_refinement_returns_the_finest_aux_map() {
    let cfg = small(ModelConfig::default());
    let (model, store) = ChangeModel::build(&cfg, 3).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    let lmm = model.lmm.as_ref().unwrap();
    store.set_value(lmm.mix, Tensor::from_f64(&[1], &[-40.0]).unwrap()).unwrap();
    let (p, ps) = provider(8);
    let ps: ParamStore<f64> = ps.cast();
    let (a, b) = images(3, 1, 64);
    let g = Graph::new();
    let out = model.forward(&g, &store, &p, &ps, g.constant(a.cast()), g.constant(b.cast()), None).unwrap();
    assert!(g.value(out.logits).max_abs_diff(&g.value(out.aux[0])) <= 1e-6);
}

#[test]
fn provider_width_must_match() {
    let cfg = small(ModelConfig::default());
    let (model, store) = ChangeModel::build(&cfg, 4).unwrap();
    let (p, ps) = provider(12);
    let (a, b) = images(4, 1, 64);
    let g = Graph::new();
    assert!(model.forward(&g, &store, &p, &ps, g.constant(a.clone()), g.constant(b), None).is_err());
    let g = Graph::new();
    let bad = g.constant(Tensor::zeros(&[1, 3, 32, 32]).unwrap());
    assert!(model.forward(&g, &store, &provider(8).0, &provider(8).1, g.constant(a), bad, None).is_err());
}

#[test]
fn identical_epochs_give_identical_pyramids() {
    let cfg = small(ModelConfig::default());
    let (model, store) = ChangeModel::build(&cfg, 7).unwrap();
    let (p, ps) = provider(8);
    let (a, _) = images(7, 1, 64);
    let g = Graph::new();
    let x = g.constant(a);
    let out = model.forward(&g, &store, &p, &ps, x, x, None).unwrap();
    for d in out.prior {
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }
}
