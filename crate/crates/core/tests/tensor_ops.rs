use icvp::tensor::{BnMode, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r).unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Direct evaluation of a zero-padded 3D cross-correlation.
fn naive_conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: [usize; 3], dil: [usize; 3]) -> (Vec<usize>, Vec<f64>) {
    let [n, cin, d, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let [cout, _, kd, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
    let k = [kd, kh, kw];
    let pad: Vec<usize> = (0..3).map(|a| dil[a] * (k[a] - 1) / 2).collect();
    let ext = [d, h, wd];
    let out: Vec<usize> = (0..3).map(|a| (ext[a] + 2 * pad[a] - dil[a] * (k[a] - 1) - 1) / stride[a] + 1).collect();
    let mut y = vec![0.0f64; n * cout * out[0] * out[1] * out[2]];
    let mut idx = 0;
    for ni in 0..n {
        for co in 0..cout {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let z = (oz * stride[0] + a * dil[0]) as isize - pad[0] as isize;
                                        let yy = (oy * stride[1] + bb * dil[1]) as isize - pad[1] as isize;
                                        let xx = (ox * stride[2] + c * dil[2]) as isize - pad[2] as isize;
                                        if z < 0 || yy < 0 || xx < 0 || z >= d as isize || yy >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        let xv = x.at(&[ni, ci, z as usize, yy as usize, xx as usize]) as f64;
                                        acc += xv * w.at(&[co, ci, a, bb, c]) as f64;
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    (vec![n, cout, out[0], out[1], out[2]], y)
}

#[test]
fn conv2d_all_ones_counts_taps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv2d_identity_kernel_returns_input() {
    let mut r = rng(1);
    let input = rand_t(&[2, 1, 7, 5], &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
    k.set(&[0, 0, 1, 1], 1.0);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(k);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv3d_constant_interior_is_27_times_value() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5, 5], 0.75).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
    let y = g.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
    assert!((g.value(y).at(&[0, 0, 2, 2, 2]) - 27.0 * 0.75).abs() < 1e-6);
}

#[test]
fn anisotropic_dilation_preserves_extent() {
    let mut r = rng(2);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[1, 1, 8, 8, 8], &mut r));
    let w = g.constant(rand_t(&[2, 1, 3, 3, 3], &mut r));
    let y = g.conv3d(x, w, None, [1; 3], [1, 2, 2]).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 8, 8, 8]);
}

#[test]
fn conv3d_matches_nested_loops() {
    let mut r = rng(3);
    for (stride, dil) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 1, 1], [1, 2, 3]), ([1, 2, 2], [1, 1, 1])] {
        let x = rand_t(&[2, 3, 5, 7, 6], &mut r);
        let w = rand_t(&[4, 3, 3, 3, 3], &mut r);
        let b = rand_t(&[4], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, wv, Some(bv), stride, dil).unwrap();
        let (shape, want) = naive_conv3d(&x, &w, Some(&b), stride, dil);
        assert_eq!(g.shape(y), shape.as_slice(), "stride {stride:?} dilation {dil:?}");
        let worst = g.value(y).data().iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-5, "stride {stride:?} dilation {dil:?}: {worst}");
    }
}

#[test]
fn deconv_doubles_extent() {
    let mut r = rng(4);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[1, 3, 8, 8], &mut r));
    let w = g.constant(rand_t(&[3, 2, 3, 3], &mut r));
    let y = g.deconv2d(x, w, None, [16, 16]).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 16, 16]);
    let x3 = g.constant(rand_t(&[1, 3, 8, 8, 8], &mut r));
    let w3 = g.constant(rand_t(&[3, 2, 3, 3, 3], &mut r));
    let y3 = g.deconv3d(x3, w3, None, [2; 3], [16; 3]).unwrap();
    assert_eq!(g.shape(y3), &[1, 2, 16, 16, 16]);
}

#[test]
fn deconv_of_deltas_stamps_kernel_at_stride_two() {
    let mut r = rng(5);
    let kernel = rand_t(&[1, 1, 3, 3], &mut r);
    let mut input = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
    input.set(&[0, 0, 1, 1], 1.0);
    input.set(&[0, 0, 1, 3], 1.0);
    let mut g = Graph::new();
    let x = g.constant(input);
    let w = g.constant(kernel.clone());
    let y = g.deconv2d(x, w, None, [8, 8]).unwrap();
    let out = g.value(y);
    let mut expected = vec![0.0f32; 64];
    for centre in [(2usize, 2usize), (2, 6)] {
        for a in 0..3 {
            for b in 0..3 {
                let (row, col) = (centre.0 + a - 1, centre.1 + b - 1);
                if col < 8 {
                    expected[row * 8 + col] += kernel.at(&[0, 0, a, b]);
                }
            }
        }
    }
    assert_eq!(out.data(), expected.as_slice());
}

fn adjoint_gap(planar: bool, cin: usize, cout: usize, ext: [usize; 3], seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let (xs, ws): (Vec<usize>, Vec<usize>) = if planar {
        (vec![2, cin, ext[1], ext[2]], vec![cout, cin, 3, 3])
    } else {
        (vec![2, cin, ext[0], ext[1], ext[2]], vec![cout, cin, 3, 3, 3])
    };
    let x = rand_t(&xs, &mut r);
    let w = g.constant(rand_t(&ws, &mut r));
    let xv = g.constant(x.clone());
    let stride = if planar { [1, 2, 2] } else { [2; 3] };
    let cx = if planar { g.conv2d(xv, w, None, 2, 1).unwrap() } else { g.conv3d(xv, w, None, stride, [1; 3]).unwrap() };
    let y = rand_t(g.shape(cx), &mut r);
    let yv = g.constant(y.clone());
    let out = if planar { [1, ext[1], ext[2]] } else { ext };
    let dy = g.deconv(yv, w, None, stride, out).unwrap();
    (dot(g.value(cx).data(), y.data()) - dot(x.data(), g.value(dy).data())).abs()
}

#[test]
fn conv_and_deconv_are_adjoint() {
    assert!(adjoint_gap(true, 3, 4, [1, 8, 10], 6) <= 1e-4);
    assert!(adjoint_gap(false, 2, 3, [6, 8, 4], 7) <= 1e-4);
    assert!(adjoint_gap(true, 2, 2, [1, 7, 9], 8) <= 1e-4);
}

#[test]
fn batchnorm_train_standardizes_each_channel() {
    let mut r = rng(9);
    let mut x = rand_t(&[3, 2, 4, 5], &mut r);
    for v in x.data_mut().iter_mut() {
        *v = 3.0 * *v + 2.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    let (y, stats) = g.batchnorm(xv, gamma, beta, BnMode::Train).unwrap();
    assert!(stats.is_some());
    let yv = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| (0..20).map(move |p| (n, p))).map(|(n, p)| yv.data()[(n * 2 + c) * 20 + p] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5, "{mean}");
        assert!((var - 1.0).abs() <= 1e-3, "{var}");
    }
}

#[test]
fn batchnorm_of_constant_channel_is_zero() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full(&[2, 1, 3, 3], 4.2).unwrap());
    let gamma = g.constant(Tensor::full(&[1], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[1]).unwrap());
    let (y, _) = g.batchnorm(xv, gamma, beta, BnMode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-6));
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let mut r = rng(10);
    let x = rand_t(&[2, 3, 4, 4], &mut r);
    let gamma = rand_t(&[3], &mut r);
    let beta = rand_t(&[3], &mut r);
    let mean = [0.3f32, -0.2, 0.0];
    let var = [0.5f32, 2.0, 1.0];
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let (y, stats) = g.batchnorm(xv, gv, bv, BnMode::Eval { mean: &mean, var: &var }).unwrap();
    assert!(stats.is_none());
    for (i, &got) in g.value(y).data().iter().enumerate() {
        let c = (i / 16) % 3;
        let want = (x.data()[i] - mean[c]) / (var[c] + 1e-5).sqrt() * gamma.data()[c] + beta.data()[c];
        assert!((got - want).abs() <= 1e-6, "{i}: {got} vs {want}");
    }
}

#[test]
fn leaky_relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![2.0, -2.0, 0.0]).unwrap());
    let y = g.leaky_relu(x, 0.1).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -0.2, 0.0]);
}

#[test]
fn concat_then_slice_recovers_pieces() {
    let mut r = rng(11);
    let a = rand_t(&[2, 4, 4], &mut r);
    let b = rand_t(&[3, 4, 4], &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[av, bv], 0).unwrap();
    assert_eq!(g.shape(c), &[5, 4, 4]);
    let one = g.concat(&[av], 0).unwrap();
    assert_eq!(g.value(one).data(), a.data());
    let sa = g.slice(c, 0, 0, 2).unwrap();
    let sb = g.slice(c, 0, 2, 3).unwrap();
    assert_eq!(g.value(sa).data(), a.data());
    assert_eq!(g.value(sb).data(), b.data());
}

#[test]
fn broadcast_sum_identities_and_gradient() {
    let mut r = rng(12);
    let v = rand_t(&[1, 2, 4, 3, 3], &mut r);
    let f = rand_t(&[1, 2, 3, 3], &mut r);
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let zf = g.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    let same = g.broadcast_sum(vv, zf).unwrap();
    assert_eq!(g.value(same).data(), v.data());

    let zv = g.constant(Tensor::zeros(&[1, 2, 4, 3, 3]).unwrap());
    let fv = g.variable(f.clone());
    let out = g.broadcast_sum(zv, fv).unwrap();
    for c in 0..2 {
        for d in 0..4 {
            for p in 0..9 {
                assert_eq!(g.value(out).data()[(c * 4 + d) * 9 + p], f.data()[c * 9 + p]);
            }
        }
    }
    let loss = g.sum(out).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(fv).unwrap().iter().all(|&d| d == 4.0));
}

/// Half-pixel linear interpolation along one axis: `(lower, upper, weight)`.
fn axis_taps(out_i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((out_i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, src - lo as f64)
}

#[test]
fn trilinear_upsample_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 2, 3, 2], 5.0).unwrap());
    let up = g.trilinear_upsample(c, 3).unwrap();
    assert_eq!(g.shape(up), &[1, 6, 9, 6]);
    assert!(g.value(up).data().iter().all(|&v| (v - 5.0).abs() < 1e-6));

    let mut r = rng(13);
    let x = rand_t(&[1, 2, 2, 2], &mut r);
    let xv = g.constant(x.clone());
    let same = g.trilinear_upsample(xv, 1).unwrap();
    assert_eq!(g.value(same).data(), x.data());

    let up = g.trilinear_upsample(xv, 3).unwrap();
    let y = g.value(up);
    for d in 0..6 {
        for i in 0..6 {
            for j in 0..6 {
                let (d0, d1, td) = axis_taps(d, 2, 6);
                let (i0, i1, ti) = axis_taps(i, 2, 6);
                let (j0, j1, tj) = axis_taps(j, 2, 6);
                let mut want = 0.0f64;
                for (dd, wd) in [(d0, 1.0 - td), (d1, td)] {
                    for (ii, wi) in [(i0, 1.0 - ti), (i1, ti)] {
                        for (jj, wj) in [(j0, 1.0 - tj), (j1, tj)] {
                            want += wd * wi * wj * x.at(&[0, dd, ii, jj]) as f64;
                        }
                    }
                }
                let got = y.at(&[0, d, i, j]) as f64;
                assert!((got - want).abs() <= 1e-6, "({d},{i},{j}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn half_square_norm_has_identity_gradient() {
    let mut r = rng(14);
    let x = rand_t(&[3, 4], &mut r);
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    let grads = g.backward(loss).unwrap();
    for (a, b) in grads.get(xv).unwrap().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn ops_are_pure_and_repeatable() {
    let mut r = rng(15);
    let x = rand_t(&[1, 2, 6, 6], &mut r);
    let w = rand_t(&[3, 2, 3, 3], &mut r);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 1, 2).unwrap();
        let y = g.leaky_relu(y, 0.1).unwrap();
        let before = g.value(xv).clone();
        assert_eq!(before.data(), x.data());
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_results_are_reported() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1], f32::MAX).unwrap());
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjointness_holds_for_random_shapes(
        planar in any::<bool>(),
        cin in 1usize..4,
        cout in 1usize..4,
        d in 2usize..6,
        h in 2usize..9,
        w in 2usize..9,
        seed in any::<u64>(),
    ) {
        prop_assert!(adjoint_gap(planar, cin, cout, [d, h, w], seed) <= 1e-4);
    }

    #[test]
    fn broadcast_gradient_counts_disparity_slices(depth in 1usize..7, c in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let v = g.variable(rand_t(&[1, c, depth, 3, 2], &mut r));
        let f = g.variable(rand_t(&[1, c, 3, 2], &mut r));
        let y = g.broadcast_sum(v, f).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(f).unwrap().iter().all(|&x| x == depth as f32));
        prop_assert!(grads.get(v).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn slicing_inverts_concat(sizes in prop::collection::vec(1usize..4, 1..4), axis in 0usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let parts: Vec<Tensor> = sizes.iter().map(|&s| {
            let mut shape = vec![2, 3, 2];
            shape[axis] = s;
            rand_t(&shape, &mut r)
        }).collect();
        let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let cat = g.concat(&vars, axis).unwrap();
        let mut start = 0;
        for (p, &s) in parts.iter().zip(&sizes) {
            let piece = g.slice(cat, axis, start, s).unwrap();
            prop_assert_eq!(g.value(piece).data(), p.data());
            start += s;
        }
    }

    #[test]
    fn upsampling_preserves_constants(v in -10.0f32..10.0, factor in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = [1, r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&shape, v).unwrap());
        let y = g.trilinear_upsample(x, factor).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&o| (o - v).abs() <= 1e-5 * v.abs().max(1.0)));
    }
}
