use adamae::model::AdaMae;
use adamae::train::{linear_probe, seeded_rng, ProbeConfig, ProbeData, TrainConfig};

#[test]
fn random_init_encoder_probes_at_chance() {
    let cfg = TrainConfig::default();
    let model = AdaMae::new(cfg.arch.clone()).unwrap();
    let params = model.init_params(&mut seeded_rng(cfg.optim.seed)).unwrap();
    let (train, test) = ProbeData::default().generate(&cfg.data.sprite, model.geometry()).unwrap();
    let r = linear_probe(&model, &params, &train, &test, &ProbeConfig::default()).unwrap();
    assert!((r.test_accuracy - 0.25).abs() <= 0.05, "{r:?}");
}

#[test]
fn probe_ignores_clip_order() {
    let cfg = TrainConfig::default();
    let model = AdaMae::new(cfg.arch.clone()).unwrap();
    let params = model.init_params(&mut seeded_rng(3)).unwrap();
    let data = ProbeData { train_count: 40, test_count: 20, seed: 77 };
    let (train, test) = data.generate(&cfg.data.sprite, model.geometry()).unwrap();
    let a = linear_probe(&model, &params, &train, &test, &ProbeConfig::default()).unwrap();
    let mut rev = train.clone();
    rev.reverse();
    let b = linear_probe(&model, &params, &rev, &test, &ProbeConfig::default()).unwrap();
    assert!((a.test_accuracy - b.test_accuracy).abs() <= 1.0 / 20.0, "{a:?} vs {b:?}");
}
