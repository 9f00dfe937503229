use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcad_tensor::gradcheck::{self, all_probes};
use rcad_tensor::{Graph, Result, Tensor, TensorError, Var};

const FD_EPS: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// `Σ wᵢ·yᵢ` with fixed pseudo-random weights, so every output element
/// carries a distinct sensitivity.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = rand_t(g.shape(y), seed);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn assert_fd<F>(inputs: &[Tensor], which: &[usize], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probes = all_probes(inputs, which);
    let r = gradcheck::check(inputs, &probes, FD_EPS, f).unwrap();
    assert!(
        r.passes(FD_TOL),
        "relative error {} exceeds {FD_TOL}\nanalytic {:?}\nnumeric  {:?}",
        r.rel_error,
        &r.analytic[..r.analytic.len().min(8)],
        &r.numeric[..r.numeric.len().min(8)]
    );
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv2d_downsampling_output_size() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
    let k = g.input(Tensor::zeros(&[3, 3, 2, 2]));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.conv2d(x, k, b, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 32, 32]);
}

#[test]
fn conv2d_identity_kernel_reproduces_input() {
    let c = 3;
    let mut k = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        k.data_mut()[i * c + i] = 1.0;
    }
    let input = rand_t(&[2, c, 5, 7], 1);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let kv = g.input(k);
    let b = g.input(Tensor::zeros(&[c]));
    let y = g.conv2d(x, kv, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv2d_gradient_of_sum_matches_finite_differences() {
    let inputs = [rand_t(&[1, 2, 5, 5], 2), rand_t(&[3, 2, 3, 3], 3), rand_t(&[3], 4)];
    assert_fd(&inputs, &[0], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        Ok(g.sum(y))
    });
    assert_fd(&inputs, &[0, 1, 2], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(g, y, 5)
    });
}

#[test]
fn conv2d_rejects_channel_mismatch_and_empty_output() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.input(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.input(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, k, b, 1, 0), Err(TensorError::Dimension { .. })));
    let k5 = g.input(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, k5, b, 1, 0), Err(TensorError::Dimension { .. })));
    assert!(g.conv2d(x, k5, b, 1, 1).is_ok());
}

// ------------------------------------------------------ conv_transpose2d

#[test]
fn conv_transpose2d_doubles_resolution() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 16, 16]));
    let k = g.input(Tensor::zeros(&[3, 3, 2, 2]));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.conv_transpose2d(x, k, b, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 32, 32]);
}

fn adjoint_gap(cin: usize, cout: usize, hw: usize, kernel: usize, stride: usize, seed: u64) -> f64 {
    // conv2d maps Cin→Cout with kernel Cout×Cin×k×k; the transposed op with
    // the same tensor maps Cout→Cin.
    let x = rand_t(&[1, cin, hw, hw], seed);
    let k = rand_t(&[cout, cin, kernel, kernel], seed + 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(k);
    let b0 = g.input(Tensor::zeros(&[cout]));
    let bt = g.input(Tensor::zeros(&[cin]));
    let ax = g.conv2d(xv, kv, b0, stride, 0).unwrap();
    let y = rand_t(g.shape(ax), seed + 2);
    let yv = g.input(y.clone());
    let aty = g.conv_transpose2d(yv, kv, bt, stride).unwrap();
    let lhs = g.value(ax).dot(&y).unwrap();
    let rhs = x.dot(g.value(aty)).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
}

#[test]
fn conv_transpose2d_is_adjoint_of_conv2d() {
    assert!(adjoint_gap(3, 3, 8, 2, 2, 10) < 1e-4);
    assert!(adjoint_gap(2, 4, 7, 3, 2, 20) < 1e-4);
    assert!(adjoint_gap(4, 2, 6, 3, 1, 30) < 1e-4);
}

#[test]
fn conv_transpose2d_gradients_match_finite_differences() {
    let inputs = [rand_t(&[1, 2, 3, 3], 40), rand_t(&[2, 3, 2, 2], 41), rand_t(&[3], 42)];
    assert_fd(&inputs, &[0, 1, 2], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], 2)?;
        weighted_sum(g, y, 43)
    });
}

#[test]
fn conv_transpose2d_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.input(Tensor::zeros(&[3, 3, 2, 2]));
    let b = g.input(Tensor::zeros(&[3]));
    assert!(matches!(g.conv_transpose2d(x, k, b, 2), Err(TensorError::Dimension { .. })));
}

// ---------------------------------------------------------------- conv3d

#[test]
fn conv3d_same_padding_keeps_shape() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 6, 32, 32]));
    let k = g.input(Tensor::zeros(&[8, 3, 3, 3, 3]));
    let b = g.input(Tensor::zeros(&[8]));
    let y = g.conv3d(x, k, b, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 6, 32, 32]);
}

#[test]
fn conv3d_summing_over_constant_depth_is_linear() {
    let (d, h, w) = (3, 4, 5);
    let plane = rand_t(&[h * w], 50);
    let mut data = Vec::new();
    for _ in 0..d {
        data.extend_from_slice(plane.data());
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 1, d, h, w], data).unwrap());
    let k = g.input(Tensor::full(&[1, 1, d, 1, 1], 1.0));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv3d(x, k, b, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, h, w]);
    for (o, p) in g.value(y).data().iter().zip(plane.data()) {
        assert!((o - 3.0 * p).abs() < 1e-6);
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let inputs = [rand_t(&[1, 1, 3, 4, 4], 60), rand_t(&[2, 1, 3, 3, 3], 61), rand_t(&[2], 62)];
    assert_fd(&inputs, &[0, 1, 2], |g, v| {
        let y = g.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
        weighted_sum(g, y, 63)
    });
    assert_fd(&inputs, &[0, 1], |g, v| {
        let y = g.conv3d(v[0], v[1], v[2], [1, 2, 2], [1, 1, 1])?;
        weighted_sum(g, y, 64)
    });
}

// ----------------------------------------------------------- elementwise

#[test]
fn elementwise_definitions() {
    let mut g = Graph::new();
    let x = g.input(rand_t(&[4, 3], 70));
    let z = g.l1_loss(x, x).unwrap();
    assert_eq!(g.value(z).data(), &[0.0]);

    let a = g.input(Tensor::zeros(&[2]));
    let b = g.input(Tensor::full(&[2], 1.0));
    let l2 = g.l2_loss(a, b).unwrap();
    assert_eq!(g.value(l2).data(), &[1.0]);

    let zero = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(zero);
    assert_eq!(g.value(s).data(), &[0.5]);

    let neg = g.input(Tensor::scalar(-1.0));
    let lr = g.leaky_relu(neg, 0.1);
    assert!((g.value(lr).data()[0] + 0.1).abs() < 1e-7);
}

#[test]
fn elementwise_shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(TensorError::Dimension { .. })));
    assert!(matches!(g.mul(a, b), Err(TensorError::Dimension { .. })));
    assert!(matches!(g.l1_loss(a, b), Err(TensorError::Dimension { .. })));
    assert!(matches!(g.l2_loss(a, b), Err(TensorError::Dimension { .. })));
    let c = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.concat(&[a, c], 0), Err(TensorError::Dimension { .. })));
    assert!(g.concat(&[a, c], 1).is_ok());
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let inputs = [rand_t(&[2, 3, 4], 80), rand_t(&[2, 3, 4], 81)];
    assert_fd(&inputs, &[0, 1], |g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[1])?;
        let q = g.sub(p, v[0])?;
        let r = g.scale(q, 0.7);
        weighted_sum(g, r, 82)
    });
    assert_fd(&inputs, &[0], |g, v| {
        let r = g.leaky_relu(v[0], 0.1);
        weighted_sum(g, r, 83)
    });
    assert_fd(&inputs, &[0], |g, v| {
        let s = g.sigmoid(v[0]);
        weighted_sum(g, s, 84)
    });
    assert_fd(&inputs, &[0], |g, v| {
        let s = g.clamp(v[0], -0.5, 0.5);
        weighted_sum(g, s, 85)
    });
    assert_fd(&inputs, &[0, 1], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, c, 86)
    });
    assert_fd(&inputs, &[0], |g, v| Ok(g.mean(v[0])));
    assert_fd(&inputs, &[0, 1], |g, v| g.l1_loss(v[0], v[1]));
    assert_fd(&inputs, &[0, 1], |g, v| g.l2_loss(v[0], v[1]));
    assert_fd(&inputs, &[0], |g, v| {
        let u = g.upsample2x(v[0])?;
        weighted_sum(g, u, 87)
    });
    assert_fd(&inputs, &[0], |g, v| {
        let m = g.mean_axis(v[0], 1)?;
        weighted_sum(g, m, 88)
    });
}

// ------------------------------------------------------ spatial_gradient

#[test]
fn spatial_gradient_of_constant_image_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 2, 5, 6], 0.3));
    let s = g.spatial_gradient(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));
}

#[test]
fn spatial_gradient_of_unit_ramp_is_one_inside() {
    let (h, w) = (4, 6);
    let data = (0..h * w).map(|i| (i % w) as f32).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 1, h, w], data).unwrap());
    let s = g.spatial_gradient(x).unwrap();
    let out = g.value(s).data();
    for y in 0..h {
        for xx in 0..w - 1 {
            assert_eq!(out[y * w + xx], 1.0);
        }
        // Replicated last column.
        assert_eq!(out[y * w + w - 1], 0.0);
    }
}

#[test]
fn spatial_gradient_rejects_single_row() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 1, 4]));
    assert!(g.spatial_gradient(x).is_err());
}

#[test]
fn gradient_of_gradient_map_matches_finite_differences() {
    let inputs = [rand_t(&[1, 1, 4, 4], 90)];
    assert_fd(&inputs, &[0], |g, v| {
        let s = g.spatial_gradient(v[0])?;
        weighted_sum(g, s, 91)
    });
    let inputs = [rand_t(&[2, 3, 5, 4], 92), rand_t(&[2, 3, 5, 4], 93)];
    assert_fd(&inputs, &[0], |g, v| {
        let a = g.spatial_gradient(v[0])?;
        let b = g.spatial_gradient(v[1])?;
        g.l2_loss(a, b)
    });
}

// -------------------------------------------------------------- backward

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq);
    assert_eq!(g.backward(loss).unwrap().get(p).unwrap(), &[6.0]);
}

#[test]
fn shared_use_accumulates() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::scalar(1.5), true);
    let s = g.add(p, p).unwrap();
    let loss = g.sum(s);
    assert_eq!(g.backward(loss).unwrap().get(p).unwrap(), &[2.0]);
}

#[test]
fn backward_on_non_scalar_is_a_usage_error() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::zeros(&[3]), true);
    let y = g.scale(p, 2.0);
    assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.input(Tensor::scalar(2.0));
    let p = g.leaf(Tensor::scalar(3.0), true);
    let m = g.mul(c, p).unwrap();
    let loss = g.sum(m);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &[2.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.input(rand_t(&[2, 3, 8, 8], 100));
        let k = g.input(rand_t(&[4, 3, 3, 3], 101));
        let b = g.input(rand_t(&[4], 102));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let y = g.leaky_relu(y, 0.01);
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_conv2d_shapes_pass_gradient_check(
        cin in 1usize..3, cout in 1usize..3, hw in 3usize..6,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(k <= hw + 2 * pad);
        let inputs = [rand_t(&[1, cin, hw, hw], seed), rand_t(&[cout, cin, k, k], seed + 1), rand_t(&[cout], seed + 2)];
        let probes = all_probes(&inputs, &[0, 1, 2]);
        let r = gradcheck::check(&inputs, &probes, FD_EPS, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(g, y, seed + 3)
        }).unwrap();
        prop_assert!(r.passes(FD_TOL), "rel error {}", r.rel_error);
    }

    #[test]
    fn random_adjoint_pairs_agree(
        cin in 1usize..4, cout in 1usize..4, hw in 4usize..9, k in 1usize..4, stride in 1usize..3, seed in 0u64..1000,
    ) {
        prop_assume!(k <= hw && (hw - k) % stride == 0);
        prop_assert!(adjoint_gap(cin, cout, hw, k, stride, seed) < 1e-4);
    }

    #[test]
    fn ops_stay_finite_on_finite_inputs(seed in 0u64..1000, scale in 0.1f32..100.0) {
        let mut r = rng(seed);
        let x = Tensor::rand_uniform(&[1, 2, 6, 6], -scale, scale, &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let s = g.sigmoid(xv);
        let sg = g.spatial_gradient(s).unwrap();
        let l = g.leaky_relu(xv, 0.01);
        let sg2 = g.spatial_gradient(l).unwrap();
        let loss = g.l2_loss(sg, sg2).unwrap();
        prop_assert!(g.value(loss).is_finite());
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(xv).unwrap().iter().all(|v| v.is_finite()));
        let _ = r.gen::<u8>();
    }
}
