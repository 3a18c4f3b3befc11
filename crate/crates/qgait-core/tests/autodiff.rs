//! Tape correctness: hand examples per op, the channel-partial naive
//! convolution oracle, and finite-difference checks for every
//! differentiable built-in.

mod common;

use common::{gradcheck, projected_loss, random_tensor, random_tensor_off_kink};
use qgait_core::rng::SplitMix64;
use qgait_core::tensor::{Tape, Tensor};
use qgait_core::Error;

#[test]
fn matmul_identity_and_forced_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let row = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let col = tape.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let d = tape.matmul(row, col).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);

    let bad = tape.matmul(col, a); // [2,1] × [2,2]: inner extents disagree
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = SplitMix64::new(11);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);

    let mut tape = Tape::new();
    let ar = tape.leaf(a.clone(), true);
    let br = tape.constant(b.clone());
    let c = tape.matmul(ar, br).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    let got = tape.grad(ar).unwrap();

    // d sum(A·B)/dA = ones·Bᵀ
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..5).map(|j| b.data()[k * 5 + j]).sum();
            assert!((got.data()[i * 4 + k] - expect).abs() < 1e-12);
        }
    }

    // cross-check by finite differences
    gradcheck(&[a, b], 0, 1e-5, 1e-6, &|tape, refs| {
        let c = tape.matmul(refs[0], refs[1]).unwrap();
        tape.sum(c)
    });
}

// channel-partial naive convolution: per output element, taps accumulate
// in (fy, fx) order within a channel, channels summed afterwards — the
// grouping the production kernels use, so comparisons are bit-exact.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ci, h, wi) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (co, f) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - f) / stride + 1;
    let wo = (wi + 2 * pad - f) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for nn in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        let mut cacc = 0.0;
                        for fy in 0..f {
                            for fx in 0..f {
                                let iy = (oy * stride + fy) as isize - pad as isize;
                                let ix = (ox * stride + fx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                cacc += w.data()[((o * ci + c) * f + fy) * f + fx]
                                    * x.data()
                                        [((nn * ci + c) * h + iy as usize) * wi + ix as usize];
                            }
                        }
                        acc += cacc;
                    }
                    out[((nn * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

#[test]
fn conv2d_trivial_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
    let w = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0]);

    let z = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::new(&[2, 1, 3, 3], vec![0.5; 18]).unwrap());
    let y = tape.conv2d(z, k, 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // kernel larger than padded input
    let tiny = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        tape.conv2d(tiny, big, 1, 0),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn conv2d_random_case_against_oracle() {
    let mut rng = SplitMix64::new(5);
    let x = random_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let xr = tape.constant(x.clone());
    let wr = tape.constant(w.clone());
    let y = tape.conv2d(xr, wr, 1, 0).unwrap();
    let oracle = naive_conv(&x, &w, 1, 0);
    let max_diff = tape
        .value(y)
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-12, "max diff {max_diff}");
}

#[test]
fn conv2d_bit_for_bit_against_oracle_on_small_shapes() {
    let mut rng = SplitMix64::new(17);
    for n in [1usize, 2] {
        for ci in [1usize, 3, 4] {
            for co in [1usize, 2, 4] {
                for (h, w) in [(3usize, 3usize), (4, 7), (8, 8), (5, 2)] {
                    for (f, stride, pad) in [(1usize, 1usize, 0usize), (2, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0)] {
                        if f > h + 2 * pad || f > w + 2 * pad {
                            continue;
                        }
                        let x = random_tensor(&mut rng, &[n, ci, h, w], -2.0, 2.0);
                        let wt = random_tensor(&mut rng, &[co, ci, f, f], -1.0, 1.0);
                        let mut tape = Tape::new();
                        let xr = tape.constant(x.clone());
                        let wr = tape.constant(wt.clone());
                        let y = tape.conv2d(xr, wr, stride, pad).unwrap();
                        let oracle = naive_conv(&x, &wt, stride, pad);
                        assert_eq!(
                            tape.value(y).data(),
                            oracle.data(),
                            "shape n{n} ci{ci} co{co} {h}x{w} f{f} s{stride} p{pad}"
                       );
                    }
                }
            }
        }
    }
}

#[test]
fn elementwise_trivial_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap(), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let m = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let mean = tape.mean(m);
    assert_eq!(tape.value(mean).item().unwrap(), 2.0);
    tape.backward(mean).unwrap();
    for &g in tape.grad(m).unwrap().data() {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -2.0]).unwrap());
    let gamma = tape.constant(Tensor::filled(&[3], 1.0));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .batch_norm_eval(x, gamma, beta, &[0.0; 3], &[1.0; 3])
        .unwrap();
    // identity up to the epsilon in 1/sqrt(var + eps)
    for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_train_rejects_batch_of_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let gamma = tape.constant(Tensor::filled(&[3], 1.0));
    let beta = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.batch_norm_train(x, gamma, beta),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn custom_unary_decouples_forward_and_backward() {
    // forward = round, backward = pass-through: STE semantics
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![0.4, 1.6, -2.4]).unwrap(), true);
    let y = tape
        .custom_unary(x, |v| v.round(), |g, _| g)
        .unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0, -2.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    // forward = identity, backward = pass-through: no-op both ways
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![0.7, -0.3]).unwrap(), true);
    let y = tape.custom_unary(x, |v| v, |g, _| g).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    // forward = x², backward = 3g: gradient is 3 regardless of x
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![5.0, -0.1]).unwrap(), true);
    let y = tape.custom_unary(x, |v| v * v, |g, _| 3.0 * g).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn backward_chain_and_fanout() {
    // y = (2x)² at x = 1 → dy/dx = 8
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0), true);
    let two_x = tape.scale(x, 2.0);
    let y = tape.mul(two_x, two_x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[8.0]);

    // fan-out accumulates: y = z + z → dz = 2
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.add(z, z).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(z).unwrap().data(), &[2.0]);
}

#[test]
fn backward_is_single_use_and_needs_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(x, c).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
    assert!(tape.grad(c).is_none());
}

// ── finite differences across every differentiable built-in ─────────

#[test]
fn fd_matmul_conv_and_linear_ops() {
    let mut rng = SplitMix64::new(101);
    // 1000 points per op via repeated trials over small tensors
    for trial in 0..5 {
        let seed = 1000 + trial;
        let a = random_tensor(&mut rng, &[4, 5], -1.0, 1.0); // 20 elems
        let b = random_tensor(&mut rng, &[5, 10], -1.0, 1.0); // 50 elems
        for check in 0..2 {
            gradcheck(&[a.clone(), b.clone()], check, 1e-5, 1e-5, &move |tape, r| {
                let c = tape.matmul(r[0], r[1]).unwrap();
                projected_loss(tape, c, seed)
            });
        }
        let x = random_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0); // 144 elems
        let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0); // 54 elems
        for check in 0..2 {
            gradcheck(&[x.clone(), w.clone()], check, 1e-5, 1e-5, &move |tape, r| {
                let c = tape.conv2d(r[0], r[1], 1, 1).unwrap();
                projected_loss(tape, c, seed)
            });
        }
    }
}

#[test]
fn fd_elementwise_and_reduction_ops() {
    let mut rng = SplitMix64::new(202);
    for trial in 0..8 {
        let seed = 2000 + trial;
        let a = random_tensor(&mut rng, &[5, 8], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[5, 8], -1.0, 1.0);
        for (name, build) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("scale", 3),
            ("add_scalar", 4),
            ("neg", 5),
            ("mean", 6),
            ("sum", 7),
            ("reshape", 8),
        ] {
            let _ = name;
            gradcheck(&[a.clone(), b.clone()], 0, 1e-5, 1e-5, &move |tape, r| {
                let out = match build {
                    0 => tape.add(r[0], r[1]).unwrap(),
                    1 => tape.sub(r[0], r[1]).unwrap(),
                    2 => tape.mul(r[0], r[1]).unwrap(),
                    3 => tape.scale(r[0], -1.7),
                    4 => tape.add_scalar(r[0], 0.3),
                    5 => tape.neg(r[0]),
                    6 => tape.mean(r[0]),
                    7 => tape.sum(r[0]),
                    _ => tape.reshape(r[0], &[8, 5]).unwrap(),
                };
                if tape.value(out).is_scalar() {
                    out
                } else {
                    projected_loss(tape, out, seed)
                }
            });
        }
        // relu away from the kink
        let x = random_tensor_off_kink(&mut rng, &[6, 7], 1e-2);
        gradcheck(&[x], 0, 1e-5, 1e-5, &move |tape, r| {
            let y = tape.relu(r[0]);
            projected_loss(tape, y, seed)
        });
    }
}

#[test]
fn fd_structured_ops() {
    let mut rng = SplitMix64::new(303);
    for trial in 0..5 {
        let seed = 3000 + trial;
        // bias broadcast along the channel axis
        let x = random_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let bias = random_tensor(&mut rng, &[4], -0.5, 0.5);
        for check in 0..2 {
            gradcheck(&[x.clone(), bias.clone()], check, 1e-5, 1e-5, &move |tape, r| {
                let y = tape.add_bias(r[0], r[1], 1).unwrap();
                projected_loss(tape, y, seed)
            });
        }
        // pooling ops: random draws make ties measure-zero
        let x = random_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        gradcheck(&[x.clone()], 0, 1e-5, 1e-5, &move |tape, r| {
            let y = tape.maxpool2(r[0]).unwrap();
            projected_loss(tape, y, seed)
        });
        gradcheck(&[x.clone()], 0, 1e-5, 1e-5, &move |tape, r| {
            let y = tape.max_over_axis(r[0], 1).unwrap();
            projected_loss(tape, y, seed)
        });
        gradcheck(&[x], 0, 1e-5, 1e-5, &move |tape, r| {
            let y = tape.horizontal_pool(r[0], 2).unwrap();
            projected_loss(tape, y, seed)
        });
        // part indexing and stacking
        let p = random_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
        gradcheck(&[p], 0, 1e-5, 1e-5, &move |tape, r| {
            let a = tape.index_axis1(r[0], 1).unwrap();
            let b = tape.index_axis1(r[0], 3).unwrap();
            let s = tape.stack1(&[a, b]).unwrap();
            projected_loss(tape, s, seed)
        });
        // batch norm, both parameter and input paths
        let x = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let gamma = random_tensor(&mut rng, &[4], 0.5, 1.5);
        let beta = random_tensor(&mut rng, &[4], -0.5, 0.5);
        for check in 0..3 {
            gradcheck(
                &[x.clone(), gamma.clone(), beta.clone()],
                check,
                1e-5,
                2e-5,
                &move |tape, r| {
                    let (y, _, _) = tape.batch_norm_train(r[0], r[1], r[2]).unwrap();
                    projected_loss(tape, y, seed)
                },
            );
            gradcheck(
                &[x.clone(), gamma.clone(), beta.clone()],
                check,
                1e-5,
                1e-5,
                &move |tape, r| {
                    let y = tape
                        .batch_norm_eval(r[0], r[1], r[2], &[0.1; 4], &[1.2; 4])
                        .unwrap();
                    projected_loss(tape, y, seed)
                },
            );
        }
    }
}
