//! Finite-difference checks for every differentiable op.

use vton_tensor::nn::{BatchNorm2d, Mode, ParamStore};
use vton_tensor::{concat_channels, Tape, Tensor, Var};

fn pseudo(shape: &[usize], seed: u32) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..len)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97)) % 1000;
                v as f32 / 500.0 - 1.0
            })
            .collect(),
    )
}

/// Compare the tape gradient of `f` with central differences in f64-ish
/// precision (f32 engine, so tolerances are loose).
fn check(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let eps = 1e-2f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let eval = |delta: f32| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        tape.variable(t)
                    })
                    .collect();
                f(&tape, &vars).item() as f64
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let tol = 2e-2 * (1.0 + a.abs().max(numeric.abs()));
            assert!(
                (a - numeric).abs() < tol,
                "input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn weighted_sum<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    let w = pseudo(&x.shape(), 99).map(|v| v + 1.5);
    x.mul(tape.constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let a = pseudo(&[2, 3], 1);
    let b = pseudo(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |t, v| weighted_sum(t, v[0].mul(v[1]).add(v[0]).sub(v[1])));
    check(&[a.clone()], |t, v| weighted_sum(t, v[0].sigmoid()));
    check(&[a.clone()], |t, v| weighted_sum(t, v[0].tanh()));
    check(&[a.clone()], |t, v| weighted_sum(t, v[0].exp().scale(0.5).add_scalar(2.0)));
    check(&[a.clone()], |t, v| weighted_sum(t, v[0].square()));
    check(&[a.map(|x| x + 0.013)], |t, v| weighted_sum(t, v[0].leaky_relu(0.2)));
    check(&[a], |_, v| v[0].mean());
}

#[test]
fn conv_pool_upsample() {
    let x = pseudo(&[2, 3, 6, 5], 3);
    let w = pseudo(&[4, 3, 3, 3], 4).scale(0.3);
    let b = pseudo(&[4], 5);
    check(&[x.clone(), w.clone(), b.clone()], |t, v| {
        weighted_sum(t, v[0].conv2d(v[1], Some(v[2]), 1, 1))
    });
    check(&[x.clone(), w.clone(), b], |t, v| {
        weighted_sum(t, v[0].conv2d(v[1], Some(v[2]), 2, 1))
    });
    let pw = pseudo(&[2, 3, 1, 1], 6);
    check(&[x.clone(), pw], |t, v| weighted_sum(t, v[0].conv2d(v[1], None, 1, 0)));
    check(&[x.clone()], |t, v| weighted_sum(t, v[0].avg_pool2x2()));
    check(&[x.clone()], |t, v| weighted_sum(t, v[0].upsample2x()));
    check(&[x], |t, v| weighted_sum(t, v[0].mean_spatial()));
}

#[test]
fn channel_ops_and_norms() {
    let x = pseudo(&[2, 3, 4, 4], 7);
    let y = pseudo(&[2, 2, 4, 4], 8);
    check(&[x.clone(), y.clone()], |t, v| {
        weighted_sum(t, concat_channels(&[v[0], v[1]]).narrow_channels(1, 3))
    });
    let m = pseudo(&[2, 1, 4, 4], 9);
    check(&[x.clone(), m], |t, v| weighted_sum(t, v[0].mul_map(v[1])));
    check(&[x.clone(), pseudo(&[3], 10), pseudo(&[3], 11)], |t, v| {
        weighted_sum(t, v[0].channel_affine(v[1], v[2]))
    });
    check(&[x.clone()], |t, v| weighted_sum(t, v[0].instance_norm(1e-5)));
    check(&[x.clone()], |t, v| weighted_sum(t, v[0].batch_norm_stats(1e-5).0));
    check(&[x], |t, v| weighted_sum(t, v[0].softmax_channels()));
}

#[test]
fn matmul_and_losses() {
    let a = pseudo(&[3, 4], 12);
    let b = pseudo(&[4, 2], 13);
    check(&[a.clone(), b, pseudo(&[2], 14)], |t, v| {
        weighted_sum(t, v[0].matmul(v[1]).add_row_bias(v[2]))
    });
    check(&[a.clone()], |_, v| v[0].scale(3.0).bce_with_logits(1.0));
    check(&[a.clone()], |_, v| v[0].scale(3.0).bce_with_logits(0.0));
    check(&[a.clone(), pseudo(&[3, 4], 15)], |_, v| v[0].mse_loss(v[1]));
    check(&[a, pseudo(&[3, 4], 16).map(|x| x + 0.37)], |_, v| v[0].l1_loss(v[1]));
}

#[test]
fn region_pool_and_broadcast() {
    let feat = pseudo(&[1, 3, 3, 3], 17);
    let mut onehot = vec![0.0; 2 * 9];
    for p in 0..9 {
        onehot[(p % 2) * 9 + p] = 1.0;
    }
    let regions = Tensor::new(&[1, 2, 3, 3], onehot);
    let r2 = regions.clone();
    check(&[feat], move |t, v| weighted_sum(t, v[0].region_mean(t.constant(r2.clone()))));
    let codes = pseudo(&[1, 2, 3], 18);
    let soft = pseudo(&[1, 2, 3, 3], 19);
    check(&[codes, soft], |t, v| weighted_sum(t, v[0].region_broadcast(v[1])));
}

#[test]
fn region_mean_is_plain_average() {
    // 2x2 map, region 0 = left column, region 1 = right column.
    let tape = Tape::new();
    let feat = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]));
    let regions = tape.constant(Tensor::new(
        &[1, 3, 2, 2],
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    ));
    let pooled = feat.region_mean(regions).value();
    assert_eq!(pooled.data(), &[2.0, 4.0, 0.0]);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2);
    let x = pseudo(&[4, 2, 3, 3], 20).map(|v| 3.0 * v + 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape, Mode::Train, true, 0);
    let _ = bn.forward(&p, tape.constant(x.clone()));
    let updates = p.take_updates();
    assert_eq!(updates.len(), 2);
    store.apply_updates(updates);
    let mean = store.get(store.find("bn.running_mean").unwrap()).data().to_vec();
    assert!(mean.iter().all(|m| m.abs() > 0.0));

    let tape = Tape::new();
    let p = store.bind(&tape, Mode::Eval, false, 0);
    let a = bn.forward(&p, tape.constant(x.clone())).value();
    let b = bn.forward(&p, tape.constant(x)).value();
    assert_eq!(a, b);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::new(&[1], vec![3.0]));
    let y = x.mul(x).add(x);
    let grads = tape.backward(y);
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}
