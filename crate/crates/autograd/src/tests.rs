use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_basis() {
    let tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(matmul(i, m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let e = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let c = tape.constant(t(&[2, 1], &[2.0, 5.0]));
    assert_eq!(matmul(e, c).unwrap().value().data(), &[2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn matmul_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let w = randn(&mut rng, &[3, 2]);
    let bb = b.clone();
    let ww = w.clone();
    let err = finite_diff_check(
        move |tape, x| {
            let b = tape.constant(bb.clone());
            let w = tape.constant(ww.clone());
            x.matmul(b)?.mul(w)?.sum()
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "lhs rel err {err}");
    let aa = a.clone();
    let err = finite_diff_check(
        move |tape, x| {
            let a = tape.constant(aa.clone());
            let w = tape.constant(w.clone());
            a.matmul(x)?.mul(w)?.sum()
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rhs rel err {err}");
}

#[test]
fn softmax_closed_forms() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    assert_eq!(softmax_lastdim(x).unwrap().value().data(), &[0.5, 0.5]);
    let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let y = softmax_lastdim(x).unwrap().value();
    assert!((y.data()[0] - 0.25).abs() < 1e-15);
    assert!((y.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[1, 5]);
    let tape = Tape::new();
    let y = softmax_lastdim(tape.constant(x.clone())).unwrap().value();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    for (yi, xi) in y.data().iter().zip(x.data()) {
        assert!((yi - xi.exp() / z).abs() < 1e-12);
    }
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = layer_norm(tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0])), g, b, LN_EPS).unwrap();
    assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = layer_norm(tape.constant(t(&[1, 2], &[1.0, -1.0])), g, b, 0.0).unwrap();
    assert_eq!(y.value().data(), &[1.0, -1.0]);
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // eps biases the variance by eps/var; a std-10 row keeps that below 1e-6.
    let x = randn(&mut rng, &[1, 16]).map(|v| 10.0 * v);
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = layer_norm(tape.constant(x), g, b, LN_EPS).unwrap().value();
    let mean = y.data().iter().sum::<f64>() / 16.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6, "{var}");
}

#[test]
fn mean_abs_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 0.0]));
    assert_eq!(mean_abs_diff(a, a).unwrap().item(), 0.0);
    let b = tape.constant(t(&[2], &[0.0, 1.0]));
    assert_eq!(mean_abs_diff(a, b).unwrap().item(), 1.0);

    let x = randn(&mut rng, &[3, 5]);
    let y = randn(&mut rng, &[3, 5]);
    let oracle = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / 15.0;
    let got = mean_abs_diff(tape.constant(x), tape.constant(y)).unwrap().item();
    assert!((got - oracle).abs() < 1e-12);

    let err = mean_abs_diff(tape.constant(Tensor::zeros(&[2])), tape.constant(Tensor::zeros(&[3])));
    assert!(err.is_err());
}

#[test]
fn mean_abs_diff_tie_subgradient_is_zero() {
    let tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let b = tape.constant(t(&[2], &[1.0, 0.0]));
    tape.backward(a.mean_abs_diff(b).unwrap()).unwrap();
    assert_eq!(tape.grad(a).data(), &[0.0, 0.5]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(backward(x), Err(TensorError::Contract { .. })));
}

#[test]
fn sum_of_squares_gradient() {
    let x = t(&[2], &[1.0, 2.0]);
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    tape.backward(v.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(tape.grad(v).data(), &[2.0, 4.0]);
    let err = finite_diff_check(|_, x| x.square()?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn unreachable_nodes_get_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = tape.leaf(t(&[2], &[3.0, 4.0]), true);
    let _unused = y.square().unwrap();
    tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(tape.grad(y).data(), &[0.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates_until_cleared() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let loss = x.square().unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).data(), &[4.0, 8.0]);
    tape.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = randn(&mut rng, &[3, 4]);
    let w = randn(&mut rng, &[4, 4]);
    fn build<'t>(tape: &'t Tape, x0: &Tensor, w: &Tensor) -> (Var<'t>, Var<'t>, Var<'t>) {
        let x = tape.leaf(x0.clone(), true);
        let w = tape.constant(w.clone());
        let h = x.matmul(w).unwrap().softmax().unwrap();
        let l1 = h.square().unwrap().mean().unwrap();
        let l2 = h.gelu().unwrap().sum().unwrap();
        (x, l1, l2)
    }
    let tape = Tape::new();
    let (x, l1, l2) = build(&tape, &x0, &w);
    tape.backward(l1.add(l2).unwrap()).unwrap();
    let joint = tape.grad(x);

    let tape = Tape::new();
    let (x, l1, _) = build(&tape, &x0, &w);
    tape.backward(l1).unwrap();
    let g1 = tape.grad(x);
    let tape = Tape::new();
    let (x, _, l2) = build(&tape, &x0, &w);
    tape.backward(l2).unwrap();
    let g2 = tape.grad(x);
    for i in 0..joint.numel() {
        assert!((joint.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
    }
}

/// Every differentiable op against central differences at h = 1e-5.
#[test]
fn every_op_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[4, 6]);
    let other = randn(&mut rng, &[4, 6]);
    let w = randn(&mut rng, &[6, 6]);
    let row = randn(&mut rng, &[6]);
    let wt = randn(&mut rng, &[36]);

    type Case = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>;

    let o = other.clone();
    let ww = w.clone();
    let rr = row.clone();
    let wt2 = wt.clone();
    // Weighted sum keeps every output coordinate relevant.
    let weigh = move |y: Var<'_>| -> Result<Tensor> {
        let n = y.value().numel();
        Ok(Tensor::from_fn(&y.shape(), |i| wt2.data()[i % 36] + (i as f64) / (n as f64)))
    };
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", {
            let ww = ww.clone();
            Box::new(move |tape, x| x.matmul(tape.leaf(ww.clone(), true)))
        }),
        ("matmul_t", {
            let o = o.clone();
            Box::new(move |tape, x| x.matmul_t(tape.constant(o.clone())))
        }),
        ("add", {
            let o = o.clone();
            Box::new(move |tape, x| x.add(tape.constant(o.clone())))
        }),
        ("sub", {
            let o = o.clone();
            Box::new(move |tape, x| tape.constant(o.clone()).sub(x))
        }),
        ("mul", {
            let o = o.clone();
            Box::new(move |tape, x| x.mul(tape.constant(o.clone()))?.mul(x))
        }),
        ("add_row", {
            let rr = rr.clone();
            Box::new(move |tape, x| x.add_row(tape.constant(rr.clone())))
        }),
        ("scale", Box::new(|_, x| x.scale(-1.7))),
        ("softmax", Box::new(|_, x| x.softmax())),
        ("layer_norm", {
            let rr = rr.clone();
            Box::new(move |tape, x| {
                let g = tape.constant(rr.clone());
                let b = tape.constant(rr.map(|v| v * 0.5));
                x.layer_norm(g, b, LN_EPS)
            })
        }),
        ("gelu", Box::new(|_, x| x.gelu())),
        ("silu", Box::new(|_, x| x.silu())),
        ("square", Box::new(|_, x| x.square())),
        ("mean_abs_diff", {
            let o = o.clone();
            Box::new(move |tape, x| x.mean_abs_diff(tape.constant(o.clone())))
        }),
        ("reshape", Box::new(|_, x| x.reshape(&[6, 4]))),
        ("slice_cols", Box::new(|_, x| x.slice_cols(1, 3))),
        ("gather_rows", Box::new(|_, x| x.gather_rows(&[3, 0, 3, 1]))),
        ("concat", Box::new(|tape, x| {
            let a = tape.concat_cols(&[x, x.slice_cols(0, 2)?])?;
            let b = tape.concat_rows(&[a, a.gather_rows(&[1])?])?;
            Ok(b)
        })),
        ("unfold3x3", Box::new(|_, x| x.unfold3x3(2, 2))),
        ("avg_pool2", Box::new(|_, x| x.avg_pool2(2, 2))),
        ("upsample2", Box::new(|_, x| x.upsample2(2, 2))),
    ];
    for (name, case) in cases {
        let weigh = weigh.clone();
        let err = finite_diff_check(
            |tape, x| {
                let y = case(tape, x)?;
                if y.value().numel() == 1 {
                    return Ok(y);
                }
                let w = tape.constant(weigh(y)?);
                y.mul(w)?.sum()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn frozen_parameters_are_untracked_unless_enabled() {
    let mut store = ParamStore::new();
    let frozen = store.add("w0", Tensor::ones(&[2]), false);
    let live = store.add("a", Tensor::ones(&[2]), true);
    let tape = Tape::new();
    let f = tape.param(&store, frozen);
    let l = tape.param(&store, live);
    assert!(!f.requires_grad());
    assert!(l.requires_grad());
    let loss = f.mul(l).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    store.accumulate_grads(&tape);
    assert_eq!(store.get(frozen).grad.data(), &[0.0, 0.0]);
    assert_eq!(store.get(live).grad.data(), &[1.0, 1.0]);

    store.get_mut(frozen).grad_enabled = true;
    store.zero_grads();
    let tape = Tape::new();
    let f = tape.param(&store, frozen);
    let l = tape.param(&store, live);
    tape.backward(f.mul(l).unwrap().sum().unwrap()).unwrap();
    store.accumulate_grads(&tape);
    assert_eq!(store.get(frozen).grad.data(), &[1.0, 1.0]);
}

#[test]
fn param_binding_is_reused_within_a_tape() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::ones(&[3]), true);
    let tape = Tape::new();
    let a = tape.param(&store, p);
    let b = tape.param(&store, p);
    assert_eq!(a.id(), b.id());
    tape.backward(a.add(b).unwrap().sum().unwrap()).unwrap();
    store.accumulate_grads(&tape);
    assert_eq!(store.get(p).grad.data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn param_coordinate_check_restores_values() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(&[2], vec![0.3, -0.7]).unwrap(), false);
    let before = store.get(p).value.clone();
    let err = finite_diff_check_params(&mut store, &[(p, 0), (p, 1)], 1e-5, |tape, s| {
        tape.param(s, p).gelu()?.sum()
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
    assert_eq!(store.get(p).value, before);
    assert!(!store.get(p).grad_enabled);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_ignore_shifts(
            row in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = row.len();
            let tape = Tape::new();
            let x = Tensor::new(&[1, n], row.clone()).unwrap();
            let shifted = x.map(|v| v + shift);
            let a = tape.constant(x).softmax().unwrap().value();
            let b = tape.constant(shifted).softmax().unwrap().value();
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.data().iter().all(|&p| p >= 0.0));
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn matmul_gradient_is_exact_for_random_shapes(
            m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&mut rng, &[m, k]);
            let b = randn(&mut rng, &[k, n]);
            let err = finite_diff_check(
                move |tape, x| x.matmul(tape.constant(b.clone()))?.square()?.sum(),
                &a,
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
