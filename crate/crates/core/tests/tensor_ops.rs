use fusmae::gradcheck::{finite_diff_grad, relative_error};
use fusmae::{Error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Max elementwise relative error between the tape gradient of
/// `sum(f(x) * w)` and its central finite difference.
fn check_unary(
    x: &Tensor<f64>,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, Var) -> fusmae::Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut tape = Tape::new();
    let probe = tape.constant(x.clone()).unwrap();
    let out_shape = f(&mut tape, probe).map(|v| tape.shape(v).to_vec()).unwrap();
    let w = random(&out_shape, &mut rng);

    let loss_of = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let y = f(&mut tape, xv).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let p = tape.mul(y, wv).unwrap();
        let l = tape.sum(p).unwrap();
        (tape, xv, l)
    };
    let (tape, xv, l) = loss_of(x);
    let g = tape.backward(l).unwrap();
    let analytic = g.wrt(xv).unwrap().clone();
    let numeric = finite_diff_grad(
        |p| {
            let (tape, _, l) = loss_of(p);
            tape.value(l).item()
        },
        x,
        1e-6,
    );
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, 1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 1]);
    assert_eq!(tape.value(c).item(), 11.0);
}

#[test]
fn matmul_shape_mismatch_is_descriptive() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    match tape.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("inner extents"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
    let numeric = finite_diff_grad(
        |a| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone()).unwrap();
            let bv = tape.constant(b.clone()).unwrap();
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.sum(c).unwrap();
            tape.value(s).item()
        },
        &a,
        1e-6,
    );
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), true).unwrap();
    let bv = tape.constant(b.clone()).unwrap();
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap();
    let analytic = g.wrt(av).unwrap();
    // frozen from the oracle
    for (&n, &expect) in numeric.data().iter().zip(&[2.0, 2.0, 2.0, 2.0]) {
        assert!((n - expect).abs() < 1e-8);
    }
    assert!(analytic.max_abs_diff(&numeric) < 1e-8);
}

#[test]
fn batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&[3, 2], &mut rng);
    let x = random(&[2, 4, 3], &mut rng);
    let e = check_unary(&x, 1, |tape, x| {
        let wv = tape.constant(w.clone())?;
        tape.matmul(x, wv)
    });
    assert!(e < 1e-6, "{e}");
    let y = random(&[2, 3, 5], &mut rng);
    let e = check_unary(&x, 2, |tape, x| {
        let yv = tape.constant(y.clone())?;
        tape.matmul(x, yv)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000.0, 1000.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_gradient_on_random_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4], &mut rng);
    let e = check_unary(&x, 3, |tape, x| tape.softmax(x, 0));
    assert!(e < 1e-6, "{e}");
    let x = random(&[3, 4, 2], &mut rng);
    let e = check_unary(&x, 4, |tape, x| tape.softmax(x, 1));
    assert!(e < 1e-6, "{e}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4])).unwrap();
    let x = tape.constant(t(&[4], &[1.0, 1.0, 1.0, 1.0])).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let g = tape.constant(Tensor::ones(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let x = tape.constant(t(&[2], &[-1.0, 1.0])).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);

    assert!(tape.layer_norm(x, g, b, 0.0).is_err());
}

#[test]
fn layer_norm_gradient_on_random_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[8], &mut rng);
    let gain = random(&[8], &mut rng);
    let bias = random(&[8], &mut rng);
    let e = check_unary(&x, 5, |tape, x| {
        let g = tape.constant(gain.clone())?;
        let b = tape.constant(bias.clone())?;
        tape.layer_norm(x, g, b, 1e-5)
    });
    assert!(e < 1e-5, "{e}");
}

/// Standard normal CDF by composite Simpson quadrature of the density, used
/// as an oracle independent of any erf implementation.
fn phi_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-12.0, x);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(a) + pdf(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pdf(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[0.0, 1.0, 12.0, -12.0])).unwrap();
    let y = tape.gelu(x).unwrap();
    let out = tape.value(y).data().to_vec();
    assert_eq!(out[0], 0.0);
    let expect = phi_quadrature(1.0);
    assert!((expect - 0.841_344_746).abs() < 1e-8);
    assert!((out[1] - expect).abs() < 1e-12, "{} vs {expect}", out[1]);
    assert!((out[2] - 12.0).abs() < 1e-12);
    assert!(out[3].abs() < 1e-12);
}

#[test]
fn gelu_and_softplus_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[3, 5], &mut rng);
    assert!(check_unary(&x, 6, |tape, x| tape.gelu(x)) < 1e-6);
    assert!(check_unary(&x, 7, |tape, x| tape.softplus(x)) < 1e-6);
    assert!(check_unary(&x, 8, |tape, x| tape.log_softmax(x)) < 1e-6);
}

#[test]
fn concat_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[4, 8])).unwrap();
    let b = tape.constant(Tensor::ones(&[4, 8])).unwrap();
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.shape(c), &[8, 8]);
    let d = tape.concat(&[b], 1).unwrap();
    assert_eq!(tape.value(d), tape.value(b));
    let bad = tape.constant(Tensor::zeros(&[3, 8])).unwrap();
    assert!(tape.concat(&[a, bad], 1).is_err());
}

#[test]
fn concat_backward_splits_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
    let b = tape.leaf(Tensor::zeros(&[2, 1]), true).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &Tensor::ones(&[2, 3]));
    assert_eq!(g.wrt(b).unwrap(), &Tensor::ones(&[2, 1]));

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let other = random(&[3, 2], &mut rng);
    let x = random(&[3, 4], &mut rng);
    let e = check_unary(&x, 9, |tape, x| {
        let o = tape.constant(other.clone())?;
        tape.concat(&[o, x, o], 1)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    assert!(matches!(
        tape.backward(sq),
        Err(Error::Shape { op: "backward", .. })
    ));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), false).unwrap();
    let y = tape.leaf(t(&[2], &[3.0, 4.0]), true).unwrap();
    let p = tape.mul(x, y).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).is_none());
    assert_eq!(g.wrt(y).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn non_finite_values_name_the_operation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[1e300, 1e300])).unwrap();
    let err = tape.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }));
}

#[test]
fn finite_differences_agree_with_softmax_matmul_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = random(&[3, 4], &mut rng);
    let x = random(&[2, 3], &mut rng);
    let e = check_unary(&x, 10, |tape, x| {
        let wv = tape.constant(w.clone())?;
        let y = tape.matmul(x, wv)?;
        tape.softmax(y, 1)
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[4, 3], &mut rng);
    assert!(check_unary(&x, 11, |tape, x| tape.transpose(x)) < 1e-6);
    assert!(check_unary(&x, 12, |tape, x| tape.reshape(x, &[2, 6])) < 1e-6);
    assert!(check_unary(&x, 13, |tape, x| tape.gather_rows(x, &[3, 0, 3, 1])) < 1e-6);
    assert!(check_unary(&x, 14, |tape, x| tape.narrow(x, 1, 2)) < 1e-6);
    assert!(check_unary(&x, 15, |tape, x| tape.scale(x, -0.7)) < 1e-6);
    assert!(check_unary(&x, 16, |tape, x| tape.mean(x)) < 1e-6);
    let b = random(&[3], &mut rng);
    assert!(
        check_unary(&x, 17, |tape, x| {
            let bv = tape.constant(b.clone())?;
            tape.add_bias(x, bv)
        }) < 1e-6
    );
    let y = random(&[4, 3], &mut rng);
    assert!(
        check_unary(&x, 18, |tape, x| {
            let yv = tape.constant(y.clone())?;
            let s = tape.sub(yv, x)?;
            let s = tape.add(s, yv)?;
            tape.mul(s, x)
        }) < 1e-6
    );
}

#[test]
fn gather_of_concat_with_complementary_indices_restores_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[6, 3], &mut rng);
    let visible = [0usize, 2, 5];
    let masked = [1usize, 3, 4];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let a = tape.gather_rows(xv, &visible).unwrap();
    let b = tape.gather_rows(xv, &masked).unwrap();
    let c = tape.concat(&[a, b], 0).unwrap();
    // position p lives at slot inverse[p] of the concatenation
    let order: Vec<usize> = visible.iter().chain(&masked).copied().collect();
    let mut inverse = vec![0; 6];
    for (slot, &p) in order.iter().enumerate() {
        inverse[p] = slot;
    }
    let back = tape.gather_rows(c, &inverse).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn repeated_forward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random(&[5, 7], &mut rng).cast::<f32>();
        let w = random(&[7, 7], &mut rng).cast::<f32>();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.leaf(w, true).unwrap();
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.softmax(y, 1).unwrap();
        let y = tape.gelu(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(s).item().to_bits(), g.wrt(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
