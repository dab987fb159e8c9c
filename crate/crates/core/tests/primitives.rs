//! Per-primitive checks: worked examples, exact vector-Jacobian products
//! against central differences, and structural invariants.

use gmrl_core::tensor::{Graph, Init, ParamStore, Shape, Tensor, Var};
use gmrl_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DELTA: f64 = 1e-4;
const VJP_TOL: f64 = 1e-6;
const CASES: u64 = 100;

fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(dims, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = dims.iter().product();
    t(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in [-2, 2] kept at least `gap` away from `kink`.
fn random_away_from(rng: &mut ChaCha8Rng, dims: &[usize], kink: f64, gap: f64) -> Tensor {
    let n: usize = dims.iter().product();
    t(
        dims,
        (0..n)
            .map(|_| loop {
                let x = rng.random_range(-2.0..2.0);
                if (x - kink).abs() > gap {
                    break x;
                }
            })
            .collect(),
    )
}

fn random_dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..4)).collect()
}

/// Worst norm-wise relative error, `max|analytic - numeric| / max|grad|` per
/// input, between the tape's VJP and central differences of `sum(f(inputs) * r)`
/// for a random cotangent `r`.
fn vjp_error(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let loss_of = |inputs: &[Tensor], r: Option<&Tensor>| -> (Graph, Var, Vec<Var>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        let r = r.cloned().unwrap_or_else(|| {
            let dims = g.value(out).dims().to_vec();
            let mut local = ChaCha8Rng::seed_from_u64(7);
            random(&mut local, &dims, -1.0, 1.0)
        });
        let rv = g.constant(r.clone()).unwrap();
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum_all(prod).unwrap();
        (g, loss, vars, r)
    };
    let (g, loss, vars, r) = loss_of(inputs, None);
    let analytic = g.grad_of(loss, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let (mut max_abs_err, mut scale) = (0.0f64, 1e-6f64);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += DELTA;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= DELTA;
            let (gp, lp, _, _) = loss_of(&plus, Some(&r));
            let (gm, lm, _, _) = loss_of(&minus, Some(&r));
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * DELTA);
            let a = analytic[k].data()[e];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(max_abs_err / scale);
    }
    worst
}

fn assert_vjp(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = case(&mut rng);
        assert!(err < VJP_TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

// ------------------------------------------------------------------ examples

#[test]
fn conv_identity_tap_returns_input() {
    let mut g = Graph::new();
    let data: Vec<f64> = (1..=8).map(f64::from).collect();
    let x = g.constant(t(&[1, 8, 1, 1], data.clone())).unwrap();
    let k = g.constant(t(&[2, 1, 1], vec![0.0, 1.0])).unwrap();
    let y = g.dilated_causal_conv1d(x, k, 2).unwrap();
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn conv_shift_kernel_pads_with_zero() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    let k = g.constant(t(&[2, 1, 1], vec![1.0, 0.0])).unwrap();
    let y = g.dilated_causal_conv1d(x, k, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn softmax_of_log_two() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], vec![2f64.ln(), 0.0, 0.0])).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for (a, b) in g.value(y).data().iter().zip([0.5, 0.25, 0.25]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_of_linear_and_quadratic_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let p = store
        .register("p", Shape::new(vec![3]).unwrap(), Init::Constant(0.3), &mut rng)
        .unwrap();
    let q = store
        .register("q", Shape::new(vec![2]).unwrap(), Init::Zeros, &mut rng)
        .unwrap();
    store.set_value(q, t(&[2], vec![1.0, 2.0])).unwrap();

    let mut g = Graph::new();
    let pv = g.param(&store, p).unwrap();
    let loss = g.sum_all(pv).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(store.grad(q).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let qv = g.param(&store, q).unwrap();
    let sq = g.mul(qv, qv).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(q).data(), &[2.0, 4.0]);
    // zeroed at the start of every backward
    assert_eq!(store.grad(p).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(t(&[2], vec![1.0, 2.0])).unwrap();
    assert!(g.backward(x, &mut store).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 3], vec![0.0; 6])).unwrap();
    let b = g.constant(t(&[4, 3], vec![0.0; 12])).unwrap();
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("(2, 3)") && msg.contains("(4, 3)"), "{msg}");
    let w = g.constant(t(&[2, 5], vec![0.0; 10])).unwrap();
    let msg = g.matmul(a, w).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("(2, 5)"), "{msg}");
}

#[test]
fn shared_operand_accumulates_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], vec![3.0, -1.0])).unwrap();
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let loss = g.sum_all(z).unwrap();
    let grads = g.grad_of(loss, &[x]).unwrap();
    assert_eq!(grads[0].data(), &[7.0, -1.0]);
}

// ------------------------------------------------------------ VJP vs. FD

#[test]
fn vjp_broadcast_binary_ops() {
    type BinOp = fn(&mut Graph, Var, Var) -> Result<Var>;
    let ops: [(&str, BinOp); 4] = [
        ("add", Graph::add),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
        ("div", Graph::div),
    ];
    for (name, op) in ops {
        assert_vjp(name, |rng| {
            let rank = rng.random_range(1..4);
            let dims = random_dims(rng, rank);
            let mut other = dims.clone();
            for d in other.iter_mut() {
                if rng.random_bool(0.3) {
                    *d = 1;
                }
            }
            let (a_dims, b_dims) = if rng.random_bool(0.5) { (dims, other) } else { (other, dims) };
            let a = random(rng, &a_dims, -2.0, 2.0);
            let b = if name == "div" {
                random(rng, &b_dims, 0.5, 2.0)
            } else {
                random(rng, &b_dims, -2.0, 2.0)
            };
            vjp_error(&[a, b], |g, v| op(g, v[0], v[1]))
        });
    }
}

#[test]
fn vjp_unary_ops() {
    assert_vjp("exp", |rng| {
        let d = random_dims(rng, 2);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.exp(v[0]))
    });
    assert_vjp("log", |rng| {
        let d = random_dims(rng, 2);
        let x = random(rng, &d, 0.2, 2.0);
        vjp_error(&[x], |g, v| g.log(v[0]))
    });
    assert_vjp("tanh", |rng| {
        let d = random_dims(rng, 3);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.tanh(v[0]))
    });
    assert_vjp("sigmoid", |rng| {
        let d = random_dims(rng, 3);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.sigmoid(v[0]))
    });
    assert_vjp("relu", |rng| {
        let d = random_dims(rng, 3);
        let x = random_away_from(rng, &d, 0.0, 1e-2);
        vjp_error(&[x], |g, v| g.relu(v[0]))
    });
    assert_vjp("clamp_min", |rng| {
        let d = random_dims(rng, 2);
        let x = random_away_from(rng, &d, 0.25, 1e-2);
        vjp_error(&[x], |g, v| g.clamp_min(v[0], 0.25))
    });
    assert_vjp("scale/add_scalar", |rng| {
        let d = random_dims(rng, 2);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            g.add_scalar(y, 0.3)
        })
    });
}

#[test]
fn vjp_linear_maps() {
    assert_vjp("matmul", |rng| {
        let lead_rank = rng.random_range(0..3);
        let lead = random_dims(rng, lead_rank);
        let (k, n) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut xd = lead.clone();
        xd.push(k);
        let x = random(rng, &xd, -2.0, 2.0);
        let w = random(rng, &[k, n], -2.0, 2.0);
        vjp_error(&[x, w], |g, v| g.matmul(v[0], v[1]))
    });
    assert_vjp("batched_matmul", |rng| {
        let d = random_dims(rng, 4);
        let a = random(rng, &[d[0], d[1], d[2]], -2.0, 2.0);
        let b = random(rng, &[d[0], d[2], d[3]], -2.0, 2.0);
        vjp_error(&[a, b], |g, v| g.batched_matmul(v[0], v[1]))
    });
}

#[test]
fn vjp_softmaxes() {
    assert_vjp("softmax", |rng| {
        let rank = rng.random_range(1..4);
        let d = random_dims(rng, rank);
        let axis = rng.random_range(0..rank);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.softmax(v[0], axis))
    });
    assert_vjp("log_softmax", |rng| {
        let rank = rng.random_range(1..4);
        let d = random_dims(rng, rank);
        let axis = rng.random_range(0..rank);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.log_softmax(v[0], axis))
    });
}

#[test]
fn vjp_structural_ops() {
    assert_vjp("concat/slice", |rng| {
        let rank = rng.random_range(1..4);
        let axis = rng.random_range(0..rank);
        let da = random_dims(rng, rank);
        let mut db = da.clone();
        db[axis] = rng.random_range(1..4);
        let a = random(rng, &da, -2.0, 2.0);
        let b = random(rng, &db, -2.0, 2.0);
        let total = da[axis] + db[axis];
        let start = rng.random_range(0..total);
        let len = rng.random_range(1..=total - start);
        vjp_error(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], axis)?;
            g.slice(c, axis, start, len)
        })
    });
    assert_vjp("sum/mean axis", |rng| {
        let rank = rng.random_range(1..4);
        let d = random_dims(rng, rank);
        let axis = rng.random_range(0..rank);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| {
            let s = g.sum_axis(v[0], axis)?;
            let m = g.mean_axis(v[0], axis)?;
            g.mul(s, m)
        })
    });
    assert_vjp("broadcast_to", |rng| {
        let d = random_dims(rng, 3);
        let mut src = d.clone();
        src[rng.random_range(0..3)] = 1;
        let x = random(rng, &src, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.broadcast_to(v[0], &d))
    });
    assert_vjp("reshape/permute", |rng| {
        let d = random_dims(rng, 3);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(p, &[d[2] * d[0], d[1]])
        })
    });
    assert_vjp("gather", |rng| {
        let d = random_dims(rng, 3);
        let axis = rng.random_range(0..3);
        let mut idims = d.clone();
        idims[axis] = rng.random_range(1..5);
        let n: usize = idims.iter().product();
        let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..d[axis])).collect();
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| g.gather(v[0], axis, &index, &idims))
    });
    assert_vjp("sum_all/mean_all", |rng| {
        let d = random_dims(rng, 2);
        let x = random(rng, &d, -2.0, 2.0);
        vjp_error(&[x], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean_all(sq)?;
            let s = g.sum_all(v[0])?;
            g.mul(m, s)
        })
    });
}

#[test]
fn vjp_dilated_causal_conv() {
    assert_vjp("dilated_causal_conv1d", |rng| {
        let (b, time, n) = (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..3));
        let (cin, cout, taps) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let dilation = rng.random_range(1..4);
        let x = random(rng, &[b, time, n, cin], -2.0, 2.0);
        let k = random(rng, &[taps, cin, cout], -2.0, 2.0);
        vjp_error(&[x, k], |g, v| g.dilated_causal_conv1d(v[0], v[1], dilation))
    });
}

// --------------------------------------------------------------- invariants

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        seed in any::<u64>(),
        rows in 1usize..6,
        width in 1usize..9,
        spread in 0.1f64..40.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, width], -spread, spread);
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let y = g.softmax(v, 1).unwrap();
        for r in g.value(y).data().chunks(width) {
            let s: f64 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            if width > 1 && spread < 10.0 {
                prop_assert!(r.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn conv_is_causal(
        seed in any::<u64>(),
        time in 2usize..12,
        taps in 1usize..4,
        dilation in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, time, 3, 2], -2.0, 2.0);
        let k = random(&mut rng, &[taps, 2, 3], -2.0, 2.0);
        let at = rng.random_range(0..time);
        let mut bumped = x.clone();
        for bi in 0..2 {
            for n in 0..3 {
                for c in 0..2 {
                    let off = bumped.offset(&[bi, at, n, c]);
                    bumped.data_mut()[off] += rng.random_range(0.5..3.0);
                }
            }
        }
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let kv = g.constant(k.clone()).unwrap();
            let y = g.dilated_causal_conv1d(xv, kv, dilation).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(x), run(bumped));
        for bi in 0..2 {
            for ti in 0..at {
                for n in 0..3 {
                    for o in 0..3 {
                        prop_assert_eq!(a.at(&[bi, ti, n, o]).to_bits(), b.at(&[bi, ti, n, o]).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_operands(
        seed in any::<u64>(),
        rank in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = rng.random_range(0..rank);
        let da = random_dims(&mut rng, rank);
        let mut db = da.clone();
        db[axis] = rng.random_range(1..4);
        let a = random(&mut rng, &da, -1e6, 1e6);
        let b = random(&mut rng, &db, -1e-6, 1e-6);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.concat(&[va, vb], axis).unwrap();
        let ra = g.slice(c, axis, 0, da[axis]).unwrap();
        let rb = g.slice(c, axis, da[axis], db[axis]).unwrap();
        prop_assert_eq!(g.value(ra), &a);
        prop_assert_eq!(g.value(rb), &b);
    }
}
