use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcad::crd::{detection_volume, CrdConfig, CrdModel};
use rcad::dpn::DpnModel;
use rcad::pipeline::selftest::{adjoint_gap, rcae_gradient_check, END_TO_END_TOLERANCE};
use rcad::rcae::{build_convae_baseline, RcaeConfig, RcaeModel};
use rcad::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn depth2_rcae_loss_gradient_matches_finite_differences() {
    for seed in [1, 2] {
        let report = rcae_gradient_check(seed, 50).unwrap();
        assert!(
            report.passes(END_TO_END_TOLERANCE),
            "seed {seed}: relative error {}",
            report.rel_error
        );
    }
}

#[test]
fn conv_and_transpose_are_adjoint() {
    assert!(adjoint_gap(4).unwrap() < 1e-4);
}

#[test]
fn shared_model_size_does_not_depend_on_depth() {
    let sizes: Vec<(usize, usize)> = (1..=6)
        .map(|depth| {
            let m = RcaeModel::new(
                RcaeConfig {
                    max_depth: depth,
                    ..RcaeConfig::default()
                },
                &mut rng(9),
            )
            .unwrap();
            (m.num_parameters(), m.store.value_bytes().len())
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");
}

#[test]
fn shared_weights_serialize_identically_whatever_depth_is_run() {
    let m = RcaeModel::new(RcaeConfig::default(), &mut rng(3)).unwrap();
    let before = m.store.value_bytes();
    let x = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng(4));
    for n in 1..=5 {
        m.forward(&x, n).unwrap();
        assert_eq!(m.store.value_bytes(), before);
    }
}

#[test]
fn unshared_model_grows_with_depth() {
    let count = |depth| {
        RcaeModel::new(
            RcaeConfig {
                max_depth: depth,
                weight_sharing: false,
                ..RcaeConfig::default()
            },
            &mut rng(0),
        )
        .unwrap()
        .num_parameters()
    };
    assert_eq!(count(4), 2 * count(2));
}

#[test]
fn compress_at_depth5_halves_resolution_each_step() {
    let m = RcaeModel::new(RcaeConfig::default(), &mut rng(1)).unwrap();
    let x = Tensor::rand_uniform(&[1, 3, 64, 96], 0.0, 1.0, &mut rng(2));
    let codes = m.compress(&x, 5).unwrap();
    assert_eq!(codes.len(), 5);
    for (i, c) in codes.iter().enumerate() {
        assert_eq!(c.shape(), &[1, 3, 64 >> (i + 1), 96 >> (i + 1)]);
    }
    let r = m.reconstruct(&codes[4], 5).unwrap();
    assert_eq!(r.shape(), x.shape());
}

#[test]
fn indivisible_input_is_rejected() {
    let m = RcaeModel::new(RcaeConfig::default(), &mut rng(1)).unwrap();
    let x = Tensor::zeros(&[1, 3, 40, 40]);
    assert!(m.compress(&x, 4).is_err());
    assert!(m.compress(&x, 3).is_ok());
}

#[test]
fn trace_reconstructions_match_forward_and_stay_in_range() {
    let m = RcaeModel::new(
        RcaeConfig {
            max_depth: 3,
            hidden_width: 8,
            ..RcaeConfig::default()
        },
        &mut rng(5),
    )
    .unwrap();
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(6));
    let trace = m.run_trace(&x, 3).unwrap();
    assert_eq!(trace.codes.len(), 3);
    for (n, r) in trace.reconstructions.iter().enumerate() {
        assert_eq!(r, &m.forward(&x, n + 1).unwrap());
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn baseline_has_per_level_blocks_without_unit_skips() {
    let cfg = RcaeConfig {
        max_depth: 3,
        ..RcaeConfig::default()
    };
    let base = build_convae_baseline(&cfg, &mut rng(0)).unwrap();
    assert!(!base.config.weight_sharing && !base.config.unit_skips);
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(1));
    assert_eq!(base.forward(&x, 3).unwrap().shape(), x.shape());
}

#[test]
fn fresh_dpn_passes_the_reconstruction_through() {
    let dpn = DpnModel::new(3, 8, &mut rng(0)).unwrap();
    let recon = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(1));
    let input = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(2));
    let (res, out) = dpn.forward(&recon, &input).unwrap();
    assert!(res.data().iter().all(|&v| v == 0.0));
    assert_eq!(out, recon);
}

#[test]
fn crd_maps_volumes_to_bounded_single_channel_maps() {
    let rcae = RcaeModel::new(
        RcaeConfig {
            max_depth: 3,
            hidden_width: 8,
            ..RcaeConfig::default()
        },
        &mut rng(0),
    )
    .unwrap();
    let dpn = DpnModel::new(3, 8, &mut rng(1)).unwrap();
    let x = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng(2));
    for steps in [vec![1, 2, 3], vec![1, 3], vec![3]] {
        let crd = CrdModel::new(
            CrdConfig {
                channels: 3,
                width: 4,
                steps: steps.clone(),
            },
            &mut rng(3),
        )
        .unwrap();
        let v = detection_volume(&rcae, &dpn, &x, &steps).unwrap();
        assert_eq!(v.shape(), &[1, 3, steps.len() + 1, 32, 32]);
        let m = crd.forward(&v).unwrap();
        assert_eq!(m.shape(), &[1, 1, 32, 32]);
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
