use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{analytic_input_grad, check_against, grad_check};
use super::*;
use crate::param::ParamStore;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_grad_is_row_sums_of_b() {
    // d sum(a·b) / d a[i][l] = sum_j b[l][j]
    let b = random(&[3, 4], 2);
    let a = random(&[2, 3], 1);
    let bb = b.clone();
    let f = move |g: &mut Graph, x: Var| {
        let bv = g.constant(bb.clone());
        let p = g.matmul(x, bv)?;
        Ok(g.sum(p))
    };
    let grad = analytic_input_grad(&f, &a).unwrap();
    for i in 0..2 {
        for l in 0..3 {
            let row: f64 = (0..4).map(|j| b.at(&[l, j])).sum();
            assert!((grad.at(&[i, l]) - row).abs() < 1e-12);
        }
    }
    assert!(grad_check(f, &a, H, TOL).unwrap().passed());
}

#[test]
fn transposed_matmul_grads() {
    for (ta, tb) in [(false, true), (true, false), (true, true)] {
        // op(a) is 3x4, op(b) is 4x2
        let a = random(if ta { &[4, 3] } else { &[3, 4] }, 5);
        let b = random(if tb { &[2, 4] } else { &[4, 2] }, 6);
        let bfix = b.clone();
        let f = move |g: &mut Graph, x: Var| {
            let bv = g.constant(bfix.clone());
            let p = g.matmul_t(x, bv, ta, tb)?;
            let sq = g.square(p);
            Ok(g.sum(sq))
        };
        let r = grad_check(&f, &a, H, TOL).unwrap();
        assert!(r.passed(), "ta={ta} tb={tb}: {r:?}");
        let afix = a.clone();
        let f2 = move |g: &mut Graph, y: Var| {
            let av = g.constant(afix.clone());
            let p = g.matmul_t(av, y, ta, tb)?;
            let sq = g.square(p);
            Ok(g.sum(sq))
        };
        let r = grad_check(&f2, &b, H, TOL).unwrap();
        assert!(r.passed(), "ta={ta} tb={tb}: {r:?}");
    }
}

#[test]
fn conv2d_hand_cases() {
    let mut g = Graph::new();
    let x = random(&[2, 3, 3], 3);
    let xv = g.constant(x.clone());
    // 1x1 identity kernel over 2 channels
    let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.conv2d(xv, w, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);

    let x4 = g.constant(Tensor::full(&[1, 4, 4], 1.0));
    let k2 = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x4, k2, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
}

#[test]
fn conv2d_rejects_non_integral_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 18, 18]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 2, 1), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv_transpose_hand_cases() {
    let mut g = Graph::new();
    let x = random(&[1, 3, 3], 4);
    let xv = g.constant(x.clone());
    let unit = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv_transpose2d(xv, unit, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let one = g.constant(t(&[1, 1, 1], &[2.5]));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv_transpose2d(one, k, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[2.5; 4]);
}

/// ⟨conv(x, w), y⟩ == ⟨x, conv_transpose(y, w)⟩
fn adjoint_gap(seed: u64, c: usize, o: usize, hw: usize, k: usize, stride: usize, pad: usize) -> f64 {
    let x = random(&[c, hw, hw], seed);
    let w = random(&[o, c, k, k], seed + 1);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let cx = g.conv2d(xv, wv, stride, pad).unwrap();
    let y = random(g.shape(cx), seed + 2);
    let yv = g.constant(y.clone());
    let ty = g.conv_transpose2d(yv, wv, stride, pad).unwrap();
    (g.value(cx).dot(&y) - x.dot(g.value(ty))).abs()
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    // forward(conv_transpose) == backward-input(conv)
    let x = random(&[2, 6, 6], 10);
    let w = random(&[3, 2, 4, 4], 11);
    let y = random(&[3, 3, 3], 12);
    let (wc, yc) = (w.clone(), y.clone());
    let f = move |g: &mut Graph, xv: Var| {
        let wv = g.constant(wc.clone());
        let yv = g.constant(yc.clone());
        let c = g.conv2d(xv, wv, 2, 1)?;
        let p = g.mul(c, yv)?;
        Ok(g.sum(p))
    };
    let back = analytic_input_grad(&f, &x).unwrap();
    let mut g = Graph::new();
    let (yv, wv) = (g.constant(y), g.constant(w));
    let ty = g.conv_transpose2d(yv, wv, 2, 1).unwrap();
    assert_close(g.value(ty).data(), back.data(), 1e-12);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::full(&[1, 4], 0.3));
    let s = g.softmax(u).unwrap();
    assert_close(g.value(s).data(), &[0.25; 4], 1e-15);

    let x = g.constant(t(&[2], &[0.0, core::f64::consts::LN_2]));
    let s = g.softmax(x).unwrap();
    assert_close(g.value(s).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);

    let big = g.constant(t(&[2], &[1000.0, 1000.0]));
    let s = g.softmax(big).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let c = g.constant(Tensor::full(&[2, 3], 7.0));
    let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    // variance 1, so (x-mean)/sqrt(1+eps)
    assert_close(g.value(y).data(), &[-1.0, 1.0], 1e-5);
}

#[test]
fn backward_closed_forms() {
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let x = g.input(t(&[3], &[1.0, -2.0, 0.5]));
    let s = g.sum(x);
    g.backward(s, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    // a second call accumulates
    g.backward(s, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    let mut store = ParamStore::new();
    assert!(matches!(g.backward(x, &mut store), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn param_gradients_accumulate_into_store() {
    let mut store = ParamStore::new();
    let p = store.add("w", t(&[2], &[3.0, -1.0]));
    for expected in [[6.0, -2.0], [12.0, -4.0]] {
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let sq = g.square(w);
        let s = g.sum(sq);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &expected);
    }
    store.zero_grads();
    assert_eq!(store.grad(p).data(), &[0.0, 0.0]);
}

#[test]
fn frozen_params_and_detach_block_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("w", t(&[2], &[1.0, 2.0]));
    let mut g = Graph::new();
    let w = g.frozen_param(&store, p);
    let x = g.input(t(&[2], &[0.5, 0.5]));
    let y = g.mul(w, x).unwrap();
    let d = g.detach(y);
    let z = g.add(y, d).unwrap();
    let s = g.sum(z);
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn grad_check_harness_controls() {
    let x = random(&[5], 20);
    let linear = |g: &mut Graph, v: Var| {
        let s = g.scale(v, 3.0);
        Ok(g.sum(s))
    };
    let r = grad_check(linear, &x, H, TOL).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    // softmax cross-entropy toy: -log softmax(x)[2], written as -x2 + logsumexp via
    // the tape: loss = -sum(onehot * log p) with log p expanded through div
    let onehot = t(&[1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
    let ce = move |g: &mut Graph, v: Var| {
        let v = g.reshape(v, &[1, 5])?;
        let p = g.softmax(v)?;
        let y = g.constant(onehot.clone());
        let diff = g.sub(p, y)?;
        let sq = g.square(diff);
        Ok(g.sum(sq))
    };
    let r = grad_check(&ce, &x, 1e-5, TOL).unwrap();
    assert!(r.passed(), "{r:?}");

    let mut wrong = analytic_input_grad(&ce, &x).unwrap();
    wrong.data_mut()[1] += 0.1;
    let r = check_against(&ce, &x, wrong.data(), 1e-5, TOL).unwrap();
    assert!(!r.passed());
}

/// Scalar test function exercising one op, followed by a fixed random projection so every
/// output coordinate matters.
fn projected(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let r = random(g.shape(y), seed);
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

#[test]
fn every_op_passes_finite_differences() {
    type Case = (&'static str, Vec<usize>, fn(&mut Graph, Var) -> Result<Var, TensorError>);
    let cases: Vec<Case> = vec![
        ("add", vec![2, 3], |g, x| {
            let c = g.constant(random(&[2, 3], 90));
            g.add(x, c)
        }),
        ("sub", vec![2, 3], |g, x| {
            let c = g.constant(random(&[2, 3], 91));
            g.sub(c, x)
        }),
        ("mul", vec![2, 3], |g, x| g.mul(x, x)),
        ("div", vec![2, 3], |g, x| {
            let c = g.constant(random(&[2, 3], 92));
            let d = g.add_scalar(x, 3.0);
            g.div(c, d)
        }),
        ("min", vec![6], |g, x| {
            let c = g.constant(random(&[6], 93));
            g.minimum(x, c)
        }),
        ("max", vec![6], |g, x| {
            let c = g.constant(random(&[6], 94));
            g.maximum(c, x)
        }),
        ("scale", vec![4], |g, x| Ok(g.scale(x, -2.5))),
        ("relu", vec![7], |g, x| Ok(g.relu(x))),
        ("sigmoid", vec![7], |g, x| Ok(g.sigmoid(x))),
        ("square", vec![7], |g, x| Ok(g.square(x))),
        ("mean", vec![7], |g, x| Ok(g.mean(x))),
        ("transpose", vec![3, 4], |g, x| g.transpose(x)),
        ("narrow", vec![3, 4, 2], |g, x| g.narrow(x, 1, 1, 2)),
        ("concat", vec![3, 2], |g, x| {
            let c = g.constant(random(&[3, 1], 95));
            g.concat(&[c, x, x], 1)
        }),
        ("bias_first", vec![3, 4], |g, x| {
            let b = g.narrow(x, 1, 0, 1)?;
            let b = g.reshape(b, &[3])?;
            g.bias_first(x, b)
        }),
        ("bias_last", vec![3, 4], |g, x| {
            let b = g.narrow(x, 0, 1, 1)?;
            let b = g.reshape(b, &[4])?;
            g.bias_last(x, b)
        }),
        ("mul_first", vec![3, 4], |g, x| {
            let b = g.narrow(x, 1, 2, 1)?;
            let b = g.reshape(b, &[3])?;
            g.mul_first(x, b)
        }),
        ("mul_last", vec![3, 4], |g, x| {
            let b = g.narrow(x, 0, 0, 1)?;
            let b = g.reshape(b, &[4])?;
            g.mul_last(x, b)
        }),
        ("softmax", vec![3, 5], |g, x| g.softmax(x)),
        ("layer_norm", vec![3, 5], |g, x| {
            let gain = g.constant(random(&[5], 96));
            let bias = g.constant(random(&[5], 97));
            g.layer_norm(x, gain, bias, 1e-5)
        }),
        ("conv2d_x", vec![2, 6, 6], |g, x| {
            let w = g.constant(random(&[3, 2, 4, 4], 98));
            g.conv2d(x, w, 2, 1)
        }),
        ("conv2d_w", vec![3, 2, 3, 3], |g, w| {
            let x = g.constant(random(&[2, 5, 5], 99));
            g.conv2d(x, w, 1, 1)
        }),
        ("conv_t_x", vec![2, 3, 3], |g, x| {
            let w = g.constant(random(&[2, 3, 3, 3], 100));
            g.conv_transpose2d(x, w, 2, 1)
        }),
        ("conv_t_w", vec![2, 3, 4, 4], |g, w| {
            let x = g.constant(random(&[2, 3, 3], 101));
            g.conv_transpose2d(x, w, 2, 1)
        }),
    ];
    for (i, (name, shape, op)) in cases.into_iter().enumerate() {
        let x = random(&shape, 200 + i as u64);
        let f = move |g: &mut Graph, v: Var| {
            let y = op(g, v)?;
            projected(g, y, 300 + i as u64)
        };
        let r = grad_check(f, &x, H, TOL).unwrap();
        assert!(r.passed(), "{name}: {r:?}");
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    // two-layer perceptron with a softmax-attention style mix
    let x = random(&[4, 3], 40);
    let w1 = random(&[3, 5], 41);
    let w2 = random(&[5, 3], 42);
    let f = move |g: &mut Graph, v: Var| {
        let a = g.constant(w1.clone());
        let b = g.constant(w2.clone());
        let h = g.matmul(v, a)?;
        let h = g.relu(h);
        let s = g.matmul_t(v, v, false, true)?;
        let p = g.softmax(s)?;
        let o = g.matmul(h, b)?;
        let mixed = g.matmul(p, o)?;
        let sq = g.square(mixed);
        Ok(g.mean(sq))
    };
    let r = grad_check(f, &x, H, TOL).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.input(random(&[2, 8, 8], 7));
        let w = g.constant(random(&[4, 2, 4, 4], 8));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.reshape(y, &[4, 16]).unwrap();
        let s = g.softmax(y).unwrap();
        let l = g.sum(s);
        let mut store = ParamStore::new();
        let sq = g.square(y);
        let l2 = g.sum(sq);
        let tot = g.add(l, l2).unwrap();
        g.backward(tot, &mut store).unwrap();
        (g.value(s).clone(), g.grad(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let mut x = random(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let xv = g.constant(x);
        let s = g.softmax(xv).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        seed in 0u64..10_000,
        c in 1usize..4,
        o in 1usize..4,
        geom in prop::sample::select(vec![(6usize, 4usize, 2usize, 1usize), (5, 3, 1, 1), (9, 3, 2, 1), (8, 2, 2, 0), (7, 1, 1, 0)]),
    ) {
        let (hw, k, stride, pad) = geom;
        prop_assert!(adjoint_gap(seed, c, o, hw, k, stride, pad) < 1e-9);
    }
}
