use adamae::model::check::{CheckInstance, LossTerm};
use adamae::model::{reconstruction_loss, AdaMae, ArchConfig, ReconLossKind};
use adamae::tensor::{Graph, Partition, Tensor};
use adamae::tokenizer::{patch_normalize, VideoTensor};
use adamae::train::seeded_rng;
use proptest::prelude::*;
use rand::Rng;

fn partition_of(inst: &CheckInstance, name: &str) -> Partition {
    inst.params.get(name).unwrap().partition
}

#[test]
fn combined_gradient_splits_by_partition() {
    // Powers of two keep the λ scaling exact.
    for (seed, lambda) in [(1u64, 1.0), (2, 0.5), (3, 0.125)] {
        let inst = CheckInstance::random(&ArchConfig::gradcheck_toy(), seed, 0.5, lambda).unwrap();
        let combined = inst.gradients(LossTerm::Combined).unwrap();
        let recon = inst.gradients(LossTerm::Reconstruction).unwrap();
        let sampling = inst.gradients(LossTerm::Sampling).unwrap();
        for (name, g) in &combined {
            let (expected, scale) = match partition_of(&inst, name) {
                Partition::Mae => (&recon[name], 1.0),
                Partition::Sampler => (&sampling[name], lambda),
            };
            for (a, b) in g.data().iter().zip(expected.data()) {
                assert_eq!(a.to_bits(), (b * scale).to_bits(), "{name} seed {seed}");
            }
        }
    }
}

fn random_video(rng: &mut impl Rng, shape: [usize; 4]) -> VideoTensor {
    let n = shape.iter().product();
    VideoTensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn reconstruction_loss_averages_over_masked_tokens() {
    let arch = ArchConfig::gradcheck_toy();
    let model = AdaMae::new(arch.clone()).unwrap();
    let geom = *model.geometry();
    let mut rng = seeded_rng(9);
    let targets = patch_normalize(&random_video(&mut rng, arch.video), &geom, 1e-6).unwrap();
    let n = geom.num_tokens();
    for count in 1..=n {
        let masked: Vec<usize> = (0..count).collect();
        // error 1 on the first masked token only
        let mut pred = targets.targets.clone();
        pred.row_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let mut g = Graph::new();
        let p = g.constant(pred);
        let r = reconstruction_loss(&mut g, p, &targets, &masked, ReconLossKind::Mse).unwrap();
        let l = g.value(r.loss).item();
        assert!((l - 1.0 / count as f64).abs() < 1e-15, "count {count}: {l}");
    }
}

/// Per block: QKV and output projections `4·n·d²`, the MLP `8·n·d²` and
/// attention scores plus weighted values `2·n²·d`.
fn encoder_macs(depth: usize, n: usize, d: usize) -> u64 {
    (depth * (12 * n * d * d + 2 * n * n * d)) as u64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_mac_count_follows_the_closed_form(nv in 1usize..64, depth in 1usize..3) {
        let arch = ArchConfig { enc_depth: depth, ..ArchConfig::toy() };
        let model = AdaMae::new(arch.clone()).unwrap();
        let params = model.init_params(&mut seeded_rng(0)).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(Tensor::full(vec![nv, arch.embed_dim], 0.1));
        let before = g.macs();
        model.encode(&mut g, &b, x).unwrap();
        prop_assert_eq!(g.macs() - before, encoder_macs(depth, nv, arch.embed_dim));
    }
}
