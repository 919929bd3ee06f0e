use autograd::{backward, finite_diff_check_params, layer_norm, matmul, mean_abs_diff, softmax_lastdim, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

#[test]
fn small_mlp_fits_a_linear_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = randn(&mut rng, &[32, 4]);
    let true_w = randn(&mut rng, &[4, 2]);
    let y = {
        let tape = Tape::new();
        matmul(tape.constant(x.clone()), tape.constant(true_w)).unwrap().value()
    };
    let mut store = ParamStore::new();
    let w1 = store.add("w1", randn(&mut rng, &[4, 16]).map(|v| v * 0.5), true);
    let b1 = store.add("b1", Tensor::zeros(&[16]), true);
    let w2 = store.add("w2", randn(&mut rng, &[16, 2]).map(|v| v * 0.25), true);

    let loss_at = |store: &ParamStore, train: bool| {
        let tape = Tape::new();
        let h = matmul(tape.constant(x.clone()), tape.param(store, w1))
            .and_then(|h| h.add_row(tape.param(store, b1)))
            .and_then(|h| h.silu())
            .unwrap();
        let out = matmul(h, tape.param(store, w2)).unwrap();
        let loss = out.sub(tape.constant(y.clone())).unwrap().square().unwrap().mean().unwrap();
        if train {
            backward(loss).unwrap();
        }
        let v = loss.item();
        (v, if train { Some(tape) } else { None })
    };
    let start = loss_at(&store, false).0;
    for _ in 0..400 {
        store.zero_grads();
        let (_, tape) = loss_at(&store, true);
        store.accumulate_grads(&tape.unwrap());
        for (_, p) in store.iter_mut() {
            let g = p.grad.clone();
            for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= 0.05 * d;
            }
        }
    }
    let end = loss_at(&store, false).0;
    assert!(end < 0.05 * start, "{start} -> {end}");
}

#[test]
fn attention_block_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let wq = store.add("wq", randn(&mut rng, &[5, 4]), false);
    let wk = store.add("wk", randn(&mut rng, &[5, 4]), false);
    let gain = store.add("gain", randn(&mut rng, &[5]), false);
    let bias = store.add("bias", randn(&mut rng, &[5]), false);
    let x = randn(&mut rng, &[3, 5]);
    let ctx = randn(&mut rng, &[6, 5]);
    let target = randn(&mut rng, &[3, 5]);
    let coords: Vec<_> = [wq, wk, gain, bias].iter().flat_map(|&p| [(p, 0), (p, 3)]).collect();
    let err = finite_diff_check_params(&mut store, &coords, 1e-5, |tape, s| {
        let xn = layer_norm(tape.constant(x.clone()), tape.param(s, gain), tape.param(s, bias), 1e-5)?;
        let q = matmul(xn, tape.param(s, wq))?;
        let k = matmul(tape.constant(ctx.clone()), tape.param(s, wk))?;
        let probs = softmax_lastdim(q.matmul_t(k)?.scale(0.5)?)?;
        let out = matmul(probs, tape.constant(ctx.clone()))?;
        mean_abs_diff(out, tape.constant(target.clone()))
    })
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}
