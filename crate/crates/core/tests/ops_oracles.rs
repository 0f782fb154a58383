//! Operator outputs against direct-loop oracles, and analytic gradients
//! against central finite differences.

use cdnet_core::gradcheck::{grad_check, grad_check_at};
use cdnet_core::ops::Reduce;
use cdnet_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six-loop zero-padded convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (b, h, wd) = (x.dims()[0], x.dims()[2], x.dims()[3]);
    let (cout, cin_g, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
    let cout_g = cout / groups;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin_g {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.at(&[co, ci, ki, kj]) * x.at(&[bi, grp * cin_g + ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.value(g.conv2d(xv, wv, None, 1, 1, 1).unwrap());
    assert_close(y.data(), &conv_oracle(&x, &w, 1, 1, 1), 1e-6);

    // strided, unpadded, grouped, and pointwise variants
    for (dims_x, dims_w, stride, pad, groups) in [
        ([2, 4, 7, 6], [6, 2, 3, 3], 2, 1, 2),
        ([1, 3, 5, 5], [4, 3, 5, 5], 1, 0, 1),
        ([2, 4, 3, 5], [8, 4, 1, 1], 1, 0, 1),
        ([1, 3, 6, 6], [3, 1, 3, 3], 2, 1, 3),
        ([2, 2, 2, 2], [1, 2, 7, 7], 1, 3, 1),
        ([1, 4, 3, 2], [4, 1, 5, 5], 2, 2, 4),
        ([3, 4, 5, 7], [4, 1, 3, 3], 1, 1, 4),
    ] {
        let x = random(&mut rng, &dims_x);
        let w = random(&mut rng, &dims_w);
        let g = Graph::new();
        let y = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, stride, pad, groups).unwrap();
        assert_close(g.value(y).data(), &conv_oracle(&x, &w, stride, pad, groups), 1e-9);
    }
}

#[test]
fn kernel_wider_than_map_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (dims_x, dims_w, stride, groups) in [([1, 2, 2, 3], [1, 2, 7, 7], 1, 1), ([2, 3, 3, 3], [3, 1, 5, 5], 2, 3)] {
        let x = random(&mut rng, &dims_x);
        let w = random(&mut rng, &dims_w);
        let pad = dims_w[2] / 2;
        let wc = w.clone();
        let r = grad_check(move |g, x| g.sum_all(g.square(g.conv2d(x, g.constant(wc.clone()), None, stride, pad, groups)?)?), &x, TOL).unwrap();
        assert!(r.passed(), "x grad {r:?}");
        let xc = x.clone();
        let r = grad_check(move |g, w| g.sum_all(g.square(g.conv2d(g.constant(xc.clone()), w, None, stride, pad, groups)?)?), &w, TOL).unwrap();
        assert!(r.passed(), "w grad {r:?}");
    }
}

#[test]
fn depthwise_equals_per_channel_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let w = random(&mut rng, &[3, 1, 3, 3]);
    let g = Graph::new();
    let y = g.value(g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, 1, 1, 3).unwrap());
    for c in 0..3 {
        let xc: Vec<f64> = (0..2).flat_map(|b| (0..25).map(move |i| (b, i))).map(|(b, i)| x.at(&[b, c, i / 5, i % 5])).collect();
        let xc = Tensor::from_vec(&[2, 1, 5, 5], xc).unwrap();
        let wc = Tensor::from_vec(&[1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let yc = g.value(g.conv2d(g.constant(xc), g.constant(wc), None, 1, 1, 1).unwrap());
        for b in 0..2 {
            for i in 0..25 {
                assert!((yc.at(&[b, 0, i / 5, i % 5]) - y.at(&[b, c, i / 5, i % 5])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 2, 3]);
    let b = random(&mut rng, &[2, 3, 2]);
    let g = Graph::new();
    let y = g.value(g.matmul_batched(g.constant(a.clone()), g.constant(b.clone())).unwrap());
    let mut oracle = Vec::new();
    for h in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                oracle.push((0..3).map(|p| a.at(&[h, i, p]) * b.at(&[h, p, j])).sum::<f64>());
            }
        }
    }
    assert_close(y.data(), &oracle, 1e-6);
}

#[test]
fn bilinear_upsample_matches_hand_evaluation() {
    // half-pixel sampling of [[1,2],[3,4]]: output rows sample source rows at
    // 0, 0.25, 0.75, 1 (after clamping)
    let expected = [
        1.0, 1.25, 1.75, 2.0, //
        1.5, 1.75, 2.25, 2.5, //
        2.5, 2.75, 3.25, 3.5, //
        3.0, 3.25, 3.75, 4.0,
    ];
    let g = Graph::new();
    let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.value(g.bilinear_resize(x, 4, 4).unwrap());
    assert_close(y.data(), &expected, 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut x = random(&mut rng, &[3, 7]).to_vec();
        x.iter_mut().for_each(|v| *v *= 60.0);
        let g = Graph::new();
        let y = g.value(g.softmax(g.constant(Tensor::from_vec(&[3, 7], x).unwrap()), 1).unwrap());
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

const TOL: f64 = 1e-4;

fn shapes4(rng: &mut ChaCha8Rng) -> Vec<[usize; 4]> {
    (0..5).map(|_| [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6)]).collect()
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (i, s) in shapes4(&mut rng).into_iter().enumerate() {
        let (cin, groups) = if i % 2 == 0 { (s[1] * 2, 2) } else { (s[1], 1) };
        let cout = 2 * groups;
        let k = if i == 3 { 1 } else { 3 };
        let stride = 1 + i % 2;
        let x = random(&mut rng, &[s[0], cin, s[2] + 1, s[3] + 1]);
        let w = random(&mut rng, &[cout, cin / groups, k, k]);
        let bias = random(&mut rng, &[cout]);
        let (wc, bc) = (w.clone(), bias.clone());
        let r = grad_check(
            move |g, x| {
                let y = g.conv2d(x, g.constant(wc.clone()), Some(g.constant(bc.clone())), stride, k / 2, groups)?;
                let y2 = g.square(y)?;
                g.sum_all(y2)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "x grad {r:?}");
        let xc = x.clone();
        let r = grad_check(
            move |g, w| {
                let y = g.conv2d(g.constant(xc.clone()), w, None, stride, k / 2, groups)?;
                g.sum_all(g.square(y)?)
            },
            &w,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "w grad {r:?}");
        let (xc, wc) = (x.clone(), w.clone());
        let r = grad_check(
            move |g, b| {
                let y = g.conv2d(g.constant(xc.clone()), g.constant(wc.clone()), Some(b), stride, k / 2, groups)?;
                g.sum_all(g.square(y)?)
            },
            &bias,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "bias grad {r:?}");
    }
    // depthwise
    let x = random(&mut rng, &[2, 3, 4, 5]);
    let w = random(&mut rng, &[3, 1, 3, 3]);
    let wc = w.clone();
    let r = grad_check(move |g, x| g.sum_all(g.square(g.conv2d(x, g.constant(wc.clone()), None, 1, 1, 3)?)?), &x, TOL).unwrap();
    assert!(r.passed(), "{r:?}");
    let r = grad_check(move |g, w| g.sum_all(g.square(g.conv2d(g.constant(x.clone()), w, None, 1, 1, 3)?)?), &w, TOL).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let (h, n, d, m) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = random(&mut rng, &[h, n, d]);
        let b = random(&mut rng, &[h, d, m]);
        let bt = random(&mut rng, &[h, m, d]);
        let w = random(&mut rng, &[h, n, m]);
        for trans_b in [false, true] {
            let other = if trans_b { bt.clone() } else { b.clone() };
            let (oc, wc) = (other.clone(), w.clone());
            let r = grad_check(
                move |g, a| {
                    let y = g.matmul_ex(a, g.constant(oc.clone()), false, trans_b)?;
                    g.sum_all(g.mul(y, g.constant(wc.clone()))?)
                },
                &a,
                TOL,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
            let (ac, wc) = (a.clone(), w.clone());
            let r = grad_check(
                move |g, b| {
                    let y = g.matmul_ex(g.constant(ac.clone()), b, false, trans_b)?;
                    g.sum_all(g.mul(y, g.constant(wc.clone()))?)
                },
                &other,
                TOL,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
        // transposed left operand
        let at = random(&mut rng, &[h, d, n]);
        let (bc, wc) = (b.clone(), w.clone());
        let r = grad_check(
            move |g, a| g.sum_all(g.mul(g.matmul_ex(a, g.constant(bc.clone()), true, false)?, g.constant(wc.clone()))?),
            &at,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for s in shapes4(&mut rng) {
        let x = random(&mut rng, &s);
        let w = random(&mut rng, &s);
        for axis in 0..4 {
            let wc = w.clone();
            let r = grad_check(move |g, x| g.sum_all(g.mul(g.softmax(x, axis)?, g.constant(wc.clone()))?), &x, TOL).unwrap();
            assert!(r.passed(), "axis {axis}: {r:?}");
        }
    }
}

#[test]
fn resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for s in shapes4(&mut rng) {
        let x = random(&mut rng, &s);
        let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
        let w = random(&mut rng, &[s[0], s[1], oh, ow]);
        let r = grad_check(move |g, x| g.sum_all(g.mul(g.bilinear_resize(x, oh, ow)?, g.constant(w.clone()))?), &x, TOL).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn rmsnorm_and_groupnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for s in shapes4(&mut rng) {
        let x = random(&mut rng, &s);
        let w = random(&mut rng, &s);
        for axis in [1, 3] {
            let gain = random(&mut rng, &[s[axis]]);
            let (gc, wc) = (gain.clone(), w.clone());
            let r = grad_check(
                move |g, x| g.sum_all(g.mul(g.rmsnorm(x, g.constant(gc.clone()), axis, 1e-6)?, g.constant(wc.clone()))?),
                &x,
                TOL,
            )
            .unwrap();
            assert!(r.passed(), "rms x {r:?}");
            let (xc, wc) = (x.clone(), w.clone());
            let r = grad_check(
                move |g, gain| g.sum_all(g.mul(g.rmsnorm(g.constant(xc.clone()), gain, axis, 1e-6)?, g.constant(wc.clone()))?),
                &gain,
                TOL,
            )
            .unwrap();
            assert!(r.passed(), "rms gain {r:?}");
        }
        let c = s[1] * 2;
        let x = random(&mut rng, &[s[0], c, s[2], s[3]]);
        let w = random(&mut rng, &[s[0], c, s[2], s[3]]);
        let gamma = random(&mut rng, &[c]);
        let beta = random(&mut rng, &[c]);
        let r = grad_check(
            move |g, x| {
                let y = g.group_norm(x, g.constant(gamma.clone()), g.constant(beta.clone()), 2, 1e-5)?;
                g.sum_all(g.mul(y, g.constant(w.clone()))?)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "gn {r:?}");
    }
}

#[test]
fn elementwise_and_reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for s in shapes4(&mut rng) {
        let x = random(&mut rng, &s);
        let other = random(&mut rng, &s);
        let row = random(&mut rng, &[1, s[1], 1, 1]);
        let o = other.clone();
        let r = grad_check(
            move |g, x| {
                let y = g.constant(o.clone());
                let a = g.mul(g.add(x, y)?, g.sub(x, y)?)?;
                let b = g.div(g.exp(x)?, g.shift(g.square(y)?, 1.0)?)?;
                let c = g.mul(g.sigmoid(x)?, g.relu(g.shift(x, 0.3)?)?)?;
                let d = g.abs(g.sub(x, y)?)?;
                let e = g.log(g.shift(g.square(x)?, 0.5)?)?;
                let f = g.sqrt(g.shift(g.square(x)?, 1.0)?)?;
                let h = g.clamp(g.scale(x, 3.0)?, -1.5, 1.5)?;
                let total = [a, b, c, d, e, f, h].into_iter().try_fold(g.neg(x)?, |acc, t| g.add(acc, t))?;
                g.sum_all(total)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let xc = x.clone();
        let r = grad_check(move |g, row| g.sum_all(g.square(g.mul(g.constant(xc.clone()), row)?)?), &row, TOL).unwrap();
        assert!(r.passed(), "broadcast {r:?}");
        let w = random(&mut rng, &[s[0], 1, s[2], 1]);
        for mode in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
            let wc = w.clone();
            let r = grad_check(
                move |g, x| g.sum_all(g.mul(g.reduce(x, &[1, 3], mode, true)?, g.constant(wc.clone()))?),
                &x,
                TOL,
            )
            .unwrap();
            assert!(r.passed(), "{mode:?} {r:?}");
        }
    }
}

#[test]
fn layout_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let a = random(&mut rng, &[2, 3, 4]);
        let b_dims = [2, rng.random_range(1..4), 4];
        let b = random(&mut rng, &b_dims);
        let w = random(&mut rng, &[4, 2, 3 + b_dims[1]]);
        let (bc, wc) = (b.clone(), w.clone());
        // concat routes each slice back to its source
        let r = grad_check(
            move |g, a| {
                let cat = g.concat(&[a, g.constant(bc.clone())], 1)?;
                let p = g.permute(cat, &[2, 0, 1])?;
                g.sum_all(g.mul(p, g.constant(wc.clone()))?)
            },
            &a,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let (ac, wc) = (a.clone(), w.clone());
        let r = grad_check(
            move |g, b| {
                let cat = g.concat(&[g.constant(ac.clone()), b], 1)?;
                g.sum_all(g.mul(g.permute(cat, &[2, 0, 1])?, g.constant(wc.clone()))?)
            },
            &b,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
    let x = random(&mut rng, &[2, 3, 8, 4]);
    let w = random(&mut rng, &[4, 3, 8, 8]);
    let r = grad_check(move |g, x| g.sum_all(g.mul(g.extract_windows(x, 4, 2)?, g.constant(w.clone()))?), &x, TOL).unwrap();
    assert!(r.passed(), "{r:?}");
    let x = random(&mut rng, &[4, 2, 2, 2]);
    let w = random(&mut rng, &[1, 2, 4, 4]);
    let r = grad_check(move |g, x| g.sum_all(g.mul(g.merge_windows(x, 1, 4, 4)?, g.constant(w.clone()))?), &x, TOL).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn fan_out_accumulates_additively() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&mut rng, &[3, 4]);
    let f = |g: &Graph<f64>, x| g.sum_all(g.sigmoid(g.square(x)?)?);
    let g1 = Graph::new();
    let xv = g1.input(x.clone());
    let once = f(&g1, xv).unwrap();
    let single = g1.backward(once).unwrap().get(xv).unwrap().to_vec();
    let g2 = Graph::new();
    let xv2 = g2.input(x.clone());
    let twice = g2.add(f(&g2, xv2).unwrap(), f(&g2, xv2).unwrap()).unwrap();
    let double = g2.backward(twice).unwrap().get(xv2).unwrap().to_vec();
    for (a, b) in single.iter().zip(&double) {
        assert!((2.0 * a - b).abs() < 1e-14);
    }
}

#[test]
fn sampled_checks_cover_requested_indices_only() {
    let x = Tensor::from_f64(&[4], &[0.5, 1.0, 1.5, 2.0]).unwrap();
    let r = grad_check_at(|g, x| g.sum_all(g.square(x)?), &x, TOL, &[1, 3]).unwrap();
    assert_eq!(r.checked, 2);
    assert!(r.passed());
}
