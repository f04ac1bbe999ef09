use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, cin, h, wd) = x.nchw().unwrap();
    let (cout, _, k, _) = w.nchw().unwrap();
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(vec![n, cout, h, wd]);
    for s in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[((s * cin + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[((s * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new(Mode::Train);
    let (x, w, b) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(x, w, b).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = rand_tensor(&[2, 1, 5, 7], 1);
    let y = conv_value(x.clone(), Tensor::full(vec![1, 1, 1, 1], 1.0), Tensor::zeros(vec![1]));
    assert_eq!(y, x);
}

#[test]
fn conv_sum_kernel_on_constant() {
    let c = 0.37;
    let x = Tensor::full(vec![1, 1, 6, 6], c);
    let y = conv_value(x, Tensor::full(vec![1, 1, 3, 3], 1.0), Tensor::zeros(vec![1]));
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((y.data()[yy * 6 + xx] - 9.0 * c).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_naive_oracle() {
    let x = rand_tensor(&[2, 3, 8, 8], 2);
    let w = rand_tensor(&[4, 3, 3, 3], 3);
    let b = rand_tensor(&[4], 4);
    let fast = conv_value(x.clone(), w.clone(), b.clone());
    let slow = naive_conv(&x, &w, &b);
    assert!(fast.max_abs_diff(&slow) < 1e-12);

    let w5 = rand_tensor(&[2, 3, 5, 5], 5);
    let b2 = rand_tensor(&[2], 6);
    let fast = conv_value(x.clone(), w5.clone(), b2.clone());
    assert!(fast.max_abs_diff(&naive_conv(&x, &w5, &b2)) < 1e-12);
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = g.input(Tensor::zeros(vec![2, 2, 3, 3]));
    let b = g.input(Tensor::zeros(vec![2]));
    match g.conv2d(x, w, b) {
        Err(Error::Shape { axis, expected: 3, actual: 2 }) => assert_eq!(axis, "kernel input channels"),
        other => panic!("unexpected {other:?}", other = other.map(|_| ())),
    }
    let w = g.input(Tensor::zeros(vec![2, 3, 2, 2]));
    assert!(g.conv2d(x, w, b).is_err());
}

#[test]
fn relu_and_maxpool_examples() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = layer_forward(&mut g, LayerKind::Relu, x, LayerParams::default()).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = layer_forward(&mut g, LayerKind::MaxPool2x2, x, LayerParams::default()).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);

    let odd = g.input(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(g.maxpool2(odd).is_err());
}

#[test]
fn layer_shape_laws() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(rand_tensor(&[2, 3, 4, 6], 7));
    let up = layer_forward(&mut g, LayerKind::Upsample2x, x, LayerParams::default()).unwrap();
    assert_eq!(g.value(up).shape(), &[2, 3, 8, 12]);
    let other = g.input(rand_tensor(&[2, 5, 4, 6], 8));
    let cat = layer_forward(
        &mut g,
        LayerKind::ConcatChannels,
        x,
        LayerParams { other: Some(other), ..Default::default() },
    )
    .unwrap();
    assert_eq!(g.value(cat).shape(), &[2, 8, 4, 6]);
    let w = g.input(rand_tensor(&[5, 72], 9));
    let b = g.input(rand_tensor(&[5], 10));
    let fc = layer_forward(
        &mut g,
        LayerKind::FullyConnected,
        x,
        LayerParams { weight: Some(w), bias: Some(b), other: None },
    )
    .unwrap();
    assert_eq!(g.value(fc).shape(), &[2, 5]);
    let bad_w = g.input(rand_tensor(&[5, 70], 9));
    assert!(g.linear(x, bad_w, b).is_err());
}

#[test]
fn batchnorm_normalises_batch_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c, h, w) = (4, 3, 5, 5);
    let mut data = Vec::new();
    for _ in 0..n {
        for ch in 0..c {
            let (mu, sd) = (3.0 * ch as f64 - 2.0, 5.0 + ch as f64);
            data.extend((0..h * w).map(|_| mu + sd * rng.gen_range(-1.7..1.7)));
        }
    }
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::new(vec![n, c, h, w], data).unwrap());
    let gamma = g.input(Tensor::full(vec![c], 1.0));
    let beta = g.input(Tensor::zeros(vec![c]));
    let y = layer_forward(
        &mut g,
        LayerKind::BatchNorm2d,
        x,
        LayerParams { weight: Some(gamma), bias: Some(beta), other: None },
    )
    .unwrap();
    let out = g.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| out.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((v - 1.0).abs() < 1e-6, "var {v}");
    }
}

#[test]
fn grad_check_mse_closed_form() {
    let b = rand_tensor(&[12], 21);
    let a = rand_tensor(&[12], 22);
    let err = grad_check(
        |g, x| {
            let t = g.input(b.clone());
            g.mse(x, t)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");

    let mut g = Graph::new(Mode::Train);
    let x = g.leaf(a.clone());
    let t = g.input(b.clone());
    let l = g.mse(x, t).unwrap();
    let grads = g.backward(l).unwrap();
    for ((ga, &av), &bv) in grads.get(x).unwrap().data().iter().zip(a.data()).zip(b.data()) {
        assert!((ga - 2.0 * (av - bv) / 12.0).abs() < 1e-15);
    }
}

#[test]
fn relu_gradient_zero_on_negative_side() {
    let mut g = Graph::new(Mode::Train);
    let x = g.leaf(Tensor::new(vec![3], vec![-0.5, 0.3, -2.0]).unwrap());
    let y = g.relu(x);
    let t = g.input(Tensor::zeros(vec![3]));
    let l = g.mse(y, t).unwrap();
    let grads = g.backward(l).unwrap();
    let d = grads.get(x).unwrap().data();
    assert_eq!(d[0], 0.0);
    assert_eq!(d[2], 0.0);
    assert!(d[1] > 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let p = rand_tensor(&[3], 1);
    assert!(matches!(grad_check(|g, x| Ok(g.relu(x)), &p, 1e-5), Err(Error::NonScalar(3))));
}

/// Scalar readout with a fixed random weighting so every output element
/// contributes a distinct gradient.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let target = rand_tensor(g.value(y).shape(), seed);
    let t = g.input(target);
    g.mse(y, t)
}

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

#[test]
fn every_primitive_passes_grad_check() {
    for seed in 0..5u64 {
        let s = 100 * seed;
        let x4 = rand_tensor(&[2, 3, 4, 4], s + 1);
        let cases: Vec<(&str, f64)> = vec![
            ("conv input", grad_check(|g, x| {
                let w = g.input(rand_tensor(&[2, 3, 3, 3], s + 2));
                let b = g.input(rand_tensor(&[2], s + 3));
                let y = g.conv2d(x, w, b)?;
                readout(g, y, s + 4)
            }, &x4, FD_EPS).unwrap()),
            ("conv kernel", grad_check(|g, w| {
                let x = g.input(x4.clone());
                let b = g.input(rand_tensor(&[2], s + 3));
                let y = g.conv2d(x, w, b)?;
                readout(g, y, s + 4)
            }, &rand_tensor(&[2, 3, 3, 3], s + 2), FD_EPS).unwrap()),
            ("conv bias", grad_check(|g, b| {
                let x = g.input(x4.clone());
                let w = g.input(rand_tensor(&[2, 3, 3, 3], s + 2));
                let y = g.conv2d(x, w, b)?;
                readout(g, y, s + 4)
            }, &rand_tensor(&[2], s + 3), FD_EPS).unwrap()),
            ("batchnorm input", grad_check(|g, x| {
                let ga = g.input(rand_tensor(&[3], s + 5));
                let be = g.input(rand_tensor(&[3], s + 6));
                let (y, _, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
                readout(g, y, s + 7)
            }, &x4, FD_EPS).unwrap()),
            ("batchnorm scale", grad_check(|g, ga| {
                let x = g.input(x4.clone());
                let be = g.input(rand_tensor(&[3], s + 6));
                let (y, _, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
                readout(g, y, s + 7)
            }, &rand_tensor(&[3], s + 5), FD_EPS).unwrap()),
            ("batchnorm eval", grad_check(|g, x| {
                let ga = g.input(rand_tensor(&[3], s + 5));
                let be = g.input(rand_tensor(&[3], s + 6));
                let y = g.batch_norm_eval(x, ga, be, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                readout(g, y, s + 7)
            }, &x4, FD_EPS).unwrap()),
            ("relu", grad_check(|g, x| {
                let y = g.relu(x);
                readout(g, y, s + 8)
            }, &x4, FD_EPS).unwrap()),
            ("maxpool", grad_check(|g, x| {
                let y = g.maxpool2(x)?;
                readout(g, y, s + 9)
            }, &x4, FD_EPS).unwrap()),
            ("upsample", grad_check(|g, x| {
                let y = g.upsample2(x)?;
                readout(g, y, s + 10)
            }, &x4, FD_EPS).unwrap()),
            ("linear", grad_check(|g, x| {
                let w = g.input(rand_tensor(&[5, 48], s + 11));
                let b = g.input(rand_tensor(&[5], s + 12));
                let y = g.linear(x, w, b)?;
                readout(g, y, s + 13)
            }, &x4, FD_EPS).unwrap()),
            ("linear weight", grad_check(|g, w| {
                let x = g.input(x4.clone());
                let b = g.input(rand_tensor(&[5], s + 12));
                let y = g.linear(x, w, b)?;
                readout(g, y, s + 13)
            }, &rand_tensor(&[5, 48], s + 11), FD_EPS).unwrap()),
            ("concat", grad_check(|g, x| {
                let o = g.input(rand_tensor(&[2, 1, 4, 4], s + 14));
                let y = g.concat_channels(o, x)?;
                readout(g, y, s + 15)
            }, &x4, FD_EPS).unwrap()),
            ("add/sub/scale", grad_check(|g, x| {
                let o = g.input(rand_tensor(&[2, 3, 4, 4], s + 16));
                let a = g.add(x, o)?;
                let b = g.sub(o, a)?;
                let c = g.scale(b, 0.7);
                let d = g.add(c, x)?;
                readout(g, d, s + 17)
            }, &x4, FD_EPS).unwrap()),
            ("scale columns", grad_check(|g, x| {
                let y = g.scale_cols(x, &[2.0, -0.5, 0.1])?;
                readout(g, y, s + 18)
            }, &rand_tensor(&[4, 3], s + 19), FD_EPS).unwrap()),
            ("magnitude", grad_check(|g, x| {
                let y = g.magnitude(x)?;
                readout(g, y, s + 20)
            }, &rand_tensor(&[2, 2, 4, 4], s + 21), FD_EPS).unwrap()),
            ("reshape", grad_check(|g, x| {
                let y = g.reshape(x, &[2, 48])?;
                readout(g, y, s + 22)
            }, &x4, FD_EPS).unwrap()),
        ];
        for (name, err) in cases {
            assert!(err < FD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn conv_bn_relu_fc_chain_grad_check() {
    for seed in 0..5u64 {
        let w = rand_tensor(&[4, 2, 3, 3], seed + 50);
        let err = grad_check(
            |g, w| {
                let x = g.input(rand_tensor(&[3, 2, 6, 6], seed + 51));
                let b = g.input(rand_tensor(&[4], seed + 52));
                let y = g.conv2d(x, w, b)?;
                let ga = g.input(rand_tensor(&[4], seed + 53));
                let be = g.input(rand_tensor(&[4], seed + 54));
                let (y, _, _) = g.batch_norm_train(y, ga, be, 1e-5)?;
                let y = g.relu(y);
                let y = g.maxpool2(y)?;
                let fw = g.input(rand_tensor(&[3, 36], seed + 55));
                let fb = g.input(rand_tensor(&[3], seed + 56));
                let y = g.linear(y, fw, fb)?;
                readout(g, y, seed + 57)
            },
            &w,
            FD_EPS,
        )
        .unwrap();
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn fourier_and_dc_ops_grad_check() {
    let rows = vec![true, false, false, true, true, false];
    for seed in 0..5u64 {
        let x = rand_tensor(&[2, 2, 6, 6], seed + 70);
        let err = grad_check(
            |g, x| {
                let k = g.fft2c(x)?;
                let m = g.input(rand_tensor(&[2, 2, 6, 6], seed + 71));
                let k = g.data_consistency(k, m, &rows)?;
                let y = g.ifft2c(k)?;
                let y = g.scale(y, 1.3);
                let k2 = g.fft2c(y)?;
                readout(g, k2, seed + 72)
            },
            &x,
            FD_EPS,
        )
        .unwrap();
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn warp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let img = {
        let mut v = vec![0.0; 2 * n * n];
        for y in 0..n {
            for x in 0..n {
                let r2 = (x as f64 - 7.0).powi(2) + (y as f64 - 8.5).powi(2);
                v[y * n + x] = (-r2 / 18.0).exp() + 0.3 * (x as f64 * 0.4).sin();
                v[n * n + y * n + x] = 0.5 * (-r2 / 8.0).exp();
            }
        }
        Tensor::new(vec![1, 2, n, n], v).unwrap()
    };
    for _ in 0..6 {
        let p = Tensor::new(
            vec![1, 3],
            vec![rng.gen_range(-2.0..2.0) + 0.37, rng.gen_range(-2.0..2.0) + 0.21, rng.gen_range(-0.3..0.3)],
        )
        .unwrap();
        let err = grad_check(
            |g, p| {
                let i = g.input(img.clone());
                let y = g.warp(i, p)?;
                readout(g, y, 99)
            },
            &p,
            // keep the central difference inside one bilinear cell
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "params {:?}: {err}", p.data());

        let err = grad_check(
            |g, i| {
                let pp = g.input(p.clone());
                let y = g.warp(i, pp)?;
                readout(g, y, 98)
            },
            &img,
            // the loss is quadratic in the image, so a wide step has no
            // truncation error and less roundoff
            1e-3,
        )
        .unwrap();
        assert!(err < FD_TOL, "image grad: {err}");
    }
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", rand_tensor(&[4], 1));
    let before = ps.clone();
    let mut st = AdamState::new(&ps, 1e-3).unwrap();
    adam_step(&mut ps, &[Some(Tensor::zeros(vec![4]))], &mut st).unwrap();
    assert_eq!(ps, before);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_magnitude_is_lr() {
    let lr = 2e-4;
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", rand_tensor(&[16], 2));
    let before = ps.value(0).clone();
    let mut st = AdamState::new(&ps, lr).unwrap();
    adam_step(&mut ps, &[Some(rand_tensor(&[16], 3))], &mut st).unwrap();
    for (a, b) in ps.value(0).data().iter().zip(before.data()) {
        let d = (a - b).abs();
        assert!(d > 0.99 * lr && d <= lr * (1.0 + 1e-12), "{d}");
    }
}

#[test]
fn adam_minimises_quadratic() {
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", Tensor::new(vec![3], vec![1.0, -0.8, 0.5]).unwrap());
    let init = ps.value(0).norm();
    let mut st = AdamState::new(&ps, 0.05).unwrap();
    for _ in 0..200 {
        let grad = ps.value(0).map(|v| 2.0 * v);
        adam_step(&mut ps, &[Some(grad)], &mut st).unwrap();
    }
    assert!(ps.value(0).norm() * 100.0 <= init, "{}", ps.value(0).norm());
}

#[test]
fn adam_errors() {
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", Tensor::zeros(vec![2]));
    ps.push("bn.running_mean", Tensor::zeros(vec![2]));
    assert!(AdamState::new(&ps, 0.0).is_err());
    let mut st = AdamState::new(&ps, 1e-3).unwrap();
    assert!(matches!(
        adam_step(&mut ps, &[None, None], &mut st),
        Err(Error::MissingGradient(name)) if name == "w"
    ));
    // buffers need no gradient
    adam_step(&mut ps, &[Some(Tensor::zeros(vec![2])), None], &mut st).unwrap();
}

#[test]
fn shared_param_gradients_accumulate() {
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new(Mode::Train);
    let a = g.param(&ps, 0);
    let b = g.param(&ps, 0);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let t = g.input(Tensor::zeros(vec![2]));
    let l = g.mse(s, t).unwrap();
    let grads = g.backward(l).unwrap();
    // d/dw mean((2w)^2) = 4w
    assert_eq!(g.param_grads(&grads, &ps)[0].as_ref().unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn forward_is_deterministic() {
    let x = rand_tensor(&[2, 3, 8, 8], 1).cast::<f32>();
    let w = rand_tensor(&[4, 3, 3, 3], 2).cast::<f32>();
    let b = rand_tensor(&[4], 3).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new(Mode::Train);
        let (xi, wi, bi) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xi, wi, bi).unwrap();
        g.value(y).clone()
    };
    let a = run();
    crate::par::set_parallel(false);
    let b2 = run();
    crate::par::set_parallel(true);
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn paramset_corruption_errors() {
    let mut ps = ParamSet::<f32>::new();
    ps.push("a.weight", Tensor::full(vec![2, 3], 0.5));
    let bytes = ps.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ParamSet::<f32>::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(ParamSet::<f32>::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
    assert!(matches!(
        ParamSet::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated { .. })
    ));
}

proptest! {
    #[test]
    fn paramset_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
            1..5,
        )
    ) {
        let mut ps = ParamSet::<f32>::new();
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect()).unwrap();
            ps.push(format!("layer{i}.weight"), t);
        }
        let bytes = ps.to_bytes();
        let (back, used) = ParamSet::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back, &ps);
    }
}
