mod common;

use cdnet::checkpoint::Checkpoint;
use cdnet::config::{DataSection, ProviderMode, TrainConfig};
use cdnet::data::synthetic;
use cdnet::eval::{evaluate, Evaluator};
use cdnet::network::Network;
use cdnet::synth::SyntheticSpec;
use cdnet::train::{train, CHECKPOINT_FILE, LOG_FILE, METRICS_FILE};
use cdnet_core::encoder::StandIn;
use cdnet_core::{Graph, Tensor};
use common::tiny_config;

#[test]
fn identical_configs_give_identical_runs() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = train(&tiny_config(d1.path()), false).unwrap();
    let r2 = train(&tiny_config(d2.path()), false).unwrap();
    assert_eq!(std::fs::read(&r1.checkpoint).unwrap(), std::fs::read(&r2.checkpoint).unwrap());
    assert_eq!(r1.records, r2.records);
    assert_eq!(r1.metrics, r2.metrics);
    for f in [LOG_FILE, METRICS_FILE] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let steps: Vec<u64> = r1.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 6]);
    assert!(r1.records[2].val.is_some());
    assert!(r1.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn different_seeds_diverge() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = train(&tiny_config(d1.path()), false).unwrap();
    let r2 = train(&TrainConfig { seed: 1, ..tiny_config(d2.path()) }, false).unwrap();
    assert_ne!(std::fs::read(r1.checkpoint).unwrap(), std::fs::read(r2.checkpoint).unwrap());
}

#[test]
fn checkpoint_reloads_to_the_same_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = train(&cfg, false).unwrap();
    let ckpt = Checkpoint::load(&run.checkpoint).unwrap();
    assert_eq!(ckpt.step, 6);
    assert_eq!(ckpt.optimizer_step, 6);
    let (net, opt) = Network::from_checkpoint(&ckpt).unwrap();
    assert_eq!(opt.step, 6);
    let DataSection::Synthetic { spec, train: n, val } = &cfg.data else { unreachable!() };
    let val_set = synthetic(spec, *n as u64, *val as u64);
    assert_eq!(evaluate(&net, &val_set, 3).unwrap(), run.metrics.unwrap());
    let saved: cdnet::eval::MetricsRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(saved, run.metrics.unwrap());
}

#[test]
fn provider_weights_stay_out_of_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(&tiny_config(dir.path()), false).unwrap();
    let ckpt = Checkpoint::load(&run.checkpoint).unwrap();
    assert!(ckpt.entries.iter().all(|e| !e.name.starts_with("provider")));
    let net = Network::build(&tiny_config(dir.path())).unwrap();
    assert_eq!(ckpt.entries.len(), net.store.len());
    let (_, fresh) = StandIn::build(net.config.provider.seed, 16).unwrap();
    for ((_, a), (_, b)) in net.provider_store.iter().zip(fresh.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn evaluating_labels_as_logits_is_perfect() {
    let samples = synthetic(&SyntheticSpec::default(), 0, 4);
    let mut ev = Evaluator::default();
    for s in &samples {
        let label = Tensor::from_vec(&[1, 1, s.h, s.w], s.label.clone()).unwrap();
        let logits = label.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        ev.add_logits(&logits, &label).unwrap();
    }
    let m = ev.record();
    assert_eq!((m.iou, m.f1, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(m.fp + m.fn_, 0);
    assert_eq!(m.tp as f32, samples.iter().map(|s| s.label.iter().sum::<f32>()).sum::<f32>());
}

#[test]
fn evaluation_is_repeatable_and_batch_independent() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&tiny_config(dir.path())).unwrap();
    let samples = synthetic(&SyntheticSpec::default(), 100, 5);
    let m = evaluate(&net, &samples, 2).unwrap();
    assert_eq!(m, evaluate(&net, &samples, 2).unwrap());
    assert_eq!(m.tp + m.fp + m.fn_ + m.tn, 5 * 64 * 64);
}

#[test]
fn files_mode_trains_on_stored_features() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("features");
    let spec = SyntheticSpec::default();
    let (net, store) = StandIn::build(5, 16).unwrap();
    for s in synthetic(&spec, 0, 6) {
        for (epoch, img) in [("A", &s.a), ("B", &s.b)] {
            std::fs::create_dir_all(feats.join(epoch)).unwrap();
            let g = Graph::new();
            let x = g.constant(Tensor::from_vec(&[1, 3, 64, 64], img.clone()).unwrap());
            for (l, tap) in net.forward(&g, &store, x).unwrap().into_iter().enumerate() {
                let t = g.value(tap);
                let d = t.dims()[1..].to_vec();
                t.reshape(&d).unwrap().save_cdt1(feats.join(epoch).join(format!("{}.l{}.cdt1", s.id, l + 1))).unwrap();
            }
        }
    }
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.provider.mode = ProviderMode::Files;
    cfg.provider.features_dir = Some(feats.clone());
    cfg.augment = cdnet::config::AugmentConfig::none();
    cfg.data = DataSection::Synthetic { spec, train: 4, val: 2 };
    assert!(TrainConfig { augment: Default::default(), ..cfg.clone() }.validate().is_err());
    let run = train(&cfg, false).unwrap();
    assert!(run.records.iter().all(|r| r.loss.is_finite()));
    assert!(dir.path().join("run").join(CHECKPOINT_FILE).exists());

    std::fs::remove_file(feats.join("B/00005.l3.cdt1")).unwrap();
    let err = train(&cfg, false).unwrap_err().to_string();
    assert!(err.contains("00005.l3.cdt1"), "{err}");
}

#[test]
fn zero_steps_still_write_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(&TrainConfig { steps: 0, ..tiny_config(dir.path()) }, false).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(Checkpoint::load(&run.checkpoint).unwrap().step, 0);
}
