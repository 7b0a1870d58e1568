use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, GradCheckOptions};
use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

/// Same as [`random`] but with every entry at least `0.1` away from zero.
fn random_nonzero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|x| if x.abs() < 0.1 { x + 0.2_f64.copysign(x) } else { x })
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn gradcheck(inputs: &[(&str, Tensor)], build: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> f64 {
    let report = check_gradients(inputs, &GradCheckOptions::default(), build).unwrap();
    report.max_rel_error()
}

#[test]
fn matmul_identity_and_hand_expansion() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[3.0, -1.5, 0.25, 7.0]);
    assert_eq!(eye.matmul(&m).unwrap(), m);
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[2, 1], &[3.0, 4.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([3, 4]));
    let b = tape.constant(Tensor::zeros([3, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = gradcheck(&[("a", random(&[3, 4], 1)), ("b", random(&[4, 2], 2))], |tape, v| {
        let c = tape.matmul(v[0], v[1])?;
        let c2 = tape.square(c);
        Ok(tape.sum(c2))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batched_matmul_with_shared_rhs_gradient() {
    let err = gradcheck(&[("a", random(&[2, 3, 4], 3)), ("w", random(&[4, 5], 4))], |tape, v| {
        let c = tape.matmul(v[0], v[1])?;
        let c2 = tape.square(c);
        Ok(tape.sum(c2))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(a);
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let b = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
    let s = tape.softmax_rows(b);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    let c = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let s = tape.softmax_rows(c);
    let d = tape.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_gradient() {
    let weights = random(&[2, 3, 3], 11);
    let err = gradcheck(&[("x", random(&[2, 3, 3], 10))], |tape, v| {
        let s = tape.softmax_rows(v[0]);
        let w = tape.constant(weights.clone());
        let p = tape.mul(s, w)?;
        Ok(tape.sum(p))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn abs_values_and_sign_rule() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-2.0, 0.0, 3.0]));
    let a = tape.abs(x);
    assert_eq!(tape.value(a).data(), &[2.0, 0.0, 3.0]);
    let loss = tape.sum(a);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn abs_gradient_away_from_zero() {
    let err = gradcheck(&[("x", random_nonzero(&[4, 3], 5))], |tape, v| {
        let a = tape.abs(v[0]);
        let sq = tape.square(a);
        Ok(tape.sum(sq))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn injected_abs_fault_is_caught_by_gradcheck() {
    let report = check_gradients(
        &[("x", random_nonzero(&[5], 6))],
        &GradCheckOptions::default(),
        |tape, v| {
            tape.inject_fault(Fault::AbsBackwardNegated);
            let a = tape.abs(v[0]);
            Ok(tape.sum(a))
        },
    )
    .unwrap();
    assert!(!report.passes(1e-4), "{report}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let c = tape.constant(t(&[2, 2], &[5.0, 5.0, -1.0, -1.0]));
    let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9, "{d:?}");
}

#[test]
fn layer_norm_gradient() {
    let w = random(&[3, 5], 21);
    let err = gradcheck(
        &[
            ("x", random(&[3, 5], 20)),
            ("gain", random(&[5], 22)),
            ("bias", random(&[5], 23)),
        ],
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = tape.constant(w.clone());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let e = tape.exp(z);
    assert_eq!(tape.value(e).item().unwrap(), 1.0);
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn elementwise_suite_gradients() {
    let a = random(&[2, 3], 30);
    let b = random(&[2, 3], 31);
    let pos = random(&[2, 3], 32).map(|x| x.abs() + 0.5);
    let nz = random_nonzero(&[2, 3], 33);
    let bias = random(&[3], 34);
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<(&str, Tensor)>, Build)> = vec![
        (
            "add",
            vec![("a", a.clone()), ("b", b.clone())],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "add-broadcast",
            vec![("a", a.clone()), ("bias", bias.clone())],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "sub",
            vec![("a", a.clone()), ("b", b.clone())],
            Box::new(|tp, v| {
                let y = tp.sub(v[0], v[1])?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "mul",
            vec![("a", a.clone()), ("b", b.clone())],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[1])?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "scale",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.scale(v[0], -1.7);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "exp",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.exp(v[0]);
                Ok(tp.sum(y))
            }),
        ),
        (
            "ln",
            vec![("p", pos.clone())],
            Box::new(|tp, v| {
                let y = tp.ln(v[0]);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "recip",
            vec![("p", pos.clone())],
            Box::new(|tp, v| {
                let y = tp.recip(v[0]);
                Ok(tp.sum(y))
            }),
        ),
        (
            "relu",
            vec![("x", nz.clone())],
            Box::new(|tp, v| {
                let y = tp.relu(v[0]);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "sigmoid",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.sigmoid(v[0]);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "softplus",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.softplus(v[0]);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "transpose_last2",
            vec![("a", a.clone()), ("b", b.clone())],
            Box::new(|tp, v| {
                let at = tp.transpose_last2(v[0])?;
                let y = tp.matmul(at, v[1])?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "reshape",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let r = tp.reshape(v[0], &[3, 2])?;
                let w = tp.constant(Tensor::from_fn([3, 2], |i| (i[0] * 2 + i[1]) as f64));
                let y = tp.mul(r, w)?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "concat_last",
            vec![("a", a.clone()), ("b", b.clone())],
            Box::new(|tp, v| {
                let c = tp.concat_last(&[v[0], v[1], v[0]])?;
                let w = tp.constant(Tensor::from_fn([2, 9], |i| 0.3 * i[1] as f64 - i[0] as f64));
                let y = tp.mul(c, w)?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "mean",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.square(v[0]);
                let m = tp.mean(y);
                Ok(tp.square(m))
            }),
        ),
        (
            "add_scalar",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let y = tp.add_scalar(v[0], 0.7);
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "permute",
            vec![("a", random(&[2, 3, 4], 35))],
            Box::new(|tp, v| {
                let p = tp.permute(v[0], &[2, 0, 1])?;
                let w = tp.constant(Tensor::from_fn([4, 2, 3], |i| {
                    (i[0] + 2 * i[1] + 3 * i[2]) as f64 * 0.1
                }));
                let y = tp.mul(p, w)?;
                let y = tp.square(y);
                Ok(tp.sum(y))
            }),
        ),
        (
            "gather-scatter",
            vec![("a", a.clone())],
            Box::new(|tp, v| {
                let g = tp.gather(v[0], vec![5, NO_INDEX, 0, 0, 3], &[5])?;
                let w = tp.constant(t(&[5], &[1.0, 2.0, 3.0, -1.0, 0.5]));
                let g = tp.mul(g, w)?;
                let s = tp.scatter_add(g, vec![0, 1, 1, NO_INDEX, 0], &[2])?;
                let s = tp.square(s);
                Ok(tp.sum(s))
            }),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = gradcheck(&inputs, |tp, v| build(tp, v));
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -4.0, 2.5]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let s1 = tape.sum(x);
    let s2 = tape.sum(x);
    let s = tape.add(s1, s2).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones([2]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones([2]));
    let unused = tape.param(Tensor::ones([3]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
}

/// Scalar op graph used by the path-sum oracle.
#[derive(Clone, Copy, Debug)]
enum ScalarOp {
    Add(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Square(usize),
    Scale(usize, f64),
}

/// d(last)/d(node 0) as a brute-force sum over all paths of products of
/// local derivatives.
fn path_sum_gradient(ops: &[ScalarOp], values: &[f64]) -> f64 {
    fn paths(ops: &[ScalarOp], values: &[f64], node: usize) -> f64 {
        if node == 0 {
            return 1.0;
        }
        // ops[node - 1] defines node
        match ops[node - 1] {
            ScalarOp::Add(a, b) => paths(ops, values, a) + paths(ops, values, b),
            ScalarOp::Mul(a, b) => values[b] * paths(ops, values, a) + values[a] * paths(ops, values, b),
            ScalarOp::Exp(a) => values[node] * paths(ops, values, a),
            ScalarOp::Square(a) => 2.0 * values[a] * paths(ops, values, a),
            ScalarOp::Scale(a, c) => c * paths(ops, values, a),
        }
    }
    paths(ops, values, values.len() - 1)
}

#[test]
fn shared_node_dag_matches_path_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let x0: f64 = rng.gen_range(-1.0..1.0);
        let n_ops = rng.gen_range(1..=5);
        let mut ops = Vec::new();
        let mut values = vec![x0];
        let mut tape = Tape::new();
        let mut vars = vec![tape.param(Tensor::scalar(x0))];
        for k in 1..=n_ops {
            let a = rng.gen_range(0..k);
            let b = rng.gen_range(0..k);
            let op = match rng.gen_range(0..5) {
                0 => ScalarOp::Add(a, b),
                1 => ScalarOp::Mul(a, b),
                2 => ScalarOp::Exp(a),
                3 => ScalarOp::Square(a),
                _ => ScalarOp::Scale(a, rng.gen_range(-2.0..2.0)),
            };
            let (v, var) = match op {
                ScalarOp::Add(a, b) => (values[a] + values[b], tape.add(vars[a], vars[b]).unwrap()),
                ScalarOp::Mul(a, b) => (values[a] * values[b], tape.mul(vars[a], vars[b]).unwrap()),
                ScalarOp::Exp(a) => (values[a].exp(), tape.exp(vars[a])),
                ScalarOp::Square(a) => (values[a] * values[a], tape.square(vars[a])),
                ScalarOp::Scale(a, c) => (c * values[a], tape.scale(vars[a], c)),
            };
            ops.push(op);
            values.push(v);
            vars.push(var);
        }
        let out = *vars.last().unwrap();
        let g = tape.backward(out).unwrap();
        let expected = path_sum_gradient(&ops, &values);
        let got = g.wrt(vars[0]).item().unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "{ops:?}: {got} vs {expected}"
        );
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        spread in 0.1f64..50.0,
    ) {
        let x = random(&[rows, cols], seed).map(|v| v * spread);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let s = tape.softmax_rows(a);
        for row in tape.value(s).data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn reshape_and_transpose_round_trip_bitwise(
        a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()
    ) {
        let x = random(&[a, b, c], seed);
        let back = x.transpose_last2().unwrap().transpose_last2().unwrap();
        prop_assert_eq!(&back, &x);
        let flat = x.reshape(vec![a * b * c]).unwrap().reshape(vec![a, b, c]).unwrap();
        prop_assert_eq!(&flat, &x);
        let p = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(&p, &x);
    }
}
