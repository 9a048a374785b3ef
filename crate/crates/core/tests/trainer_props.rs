use adamae::model::ArchConfig;
use adamae::tensor::Partition;
use adamae::train::{DataConfig, OptimHyper, TrainConfig, Trainer};

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            embed_dim: 16,
            enc_depth: 1,
            dec_dim: 8,
            dec_depth: 1,
            ..ArchConfig::toy()
        },
        optim: OptimHyper {
            batch_size: 4,
            // 20 steps per epoch, so the schedule spans `steps`
            warmup_epochs: 0.5,
            total_epochs: steps as f64 / 20.0,
            base_lr: 0.64,
            lambda: 1.0,
            ..OptimHyper::default()
        },
        data: DataConfig {
            corpus_size: 80,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn sampler_alone_learns_to_favour_the_sprite() {
    let mut cfg = small_config(150);
    cfg.freeze_mae = true;
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.params().clone();
    t.run_to_end(|_| {}).unwrap();
    let fg: Vec<f64> = t.metrics().iter().map(|r| r.fg_mass).collect();
    assert_eq!(fg.len(), 150);
    let (early, late) = (mean(&fg[..20]), mean(&fg[fg.len() - 20..]));
    assert!(late > early + 0.1, "fg mass {early} -> {late}");
    for (name, p) in before.iter() {
        let now = &t.params().get(name).unwrap().value;
        match p.partition {
            Partition::Mae => assert!(
                now.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} moved"
            ),
            Partition::Sampler => {}
        }
    }
    assert!(before.iter().any(|(name, p)| p.partition == Partition::Sampler
        && t.params().get(name).unwrap().value != p.value));
}

#[test]
fn one_metrics_row_per_step() {
    let mut cfg = small_config(40);
    cfg.optim.steps = Some(7);
    let mut t = Trainer::new(cfg).unwrap();
    t.run_to_end(|_| {}).unwrap();
    let steps: Vec<usize> = t.metrics().iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..7).collect::<Vec<_>>());
    assert_eq!(t.step(), 7);
    assert!(t.metrics().iter().all(|r| r.ms_per_step == 0.0));
}

#[test]
fn baseline_strategies_never_touch_the_sampler() {
    let mut cfg = small_config(20);
    cfg.optim.strategy = "tube".parse().unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.params().clone();
    t.run_to_end(|_| {}).unwrap();
    for (name, p) in before.iter().filter(|(_, p)| p.partition == Partition::Sampler) {
        assert_eq!(&t.params().get(name).unwrap().value, &p.value, "{name}");
    }
}
