mod common;

use common::{gradcheck, random_tensor};
use flexilength::tensorgrad::{ElementwiseOp, ReduceOp, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
fn scalarize(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).numel();
    let w = Tensor::from_fn(tape.shape(x), |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0 + 0.01 * n as f64);
    let w = tape.constant(w).unwrap();
    let y = tape.mul(x, w).unwrap();
    tape.sum(y, None).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, Var) -> Var) {
    let x = random_tensor(&mut rng(1), &[3, 4], lo, hi);
    let err = gradcheck(&[x], |t, v| {
        let y = op(t, v[0]);
        scalarize(t, y)
    });
    assert!(err < TOL, "{name}: relative error {err}");
}

fn check_binary(name: &str, sa: &[usize], sb: &[usize], op: impl Fn(&mut Tape, Var, Var) -> Var) {
    let mut r = rng(2);
    let a = random_tensor(&mut r, sa, -1.5, 1.5);
    let b = random_tensor(&mut r, sb, 0.5, 2.0);
    let err = gradcheck(&[a, b], |t, v| {
        let y = op(t, v[0], v[1]);
        scalarize(t, y)
    });
    assert!(err < TOL, "{name} {sa:?} x {sb:?}: relative error {err}");
}

#[test]
fn elementwise_binary_gradients_with_broadcast() {
    for (sa, sb) in [(vec![3, 4], vec![3, 4]), (vec![2, 3, 4], vec![4]), (vec![3, 1], vec![1, 4]), (vec![2, 1, 4], vec![3, 1])] {
        check_binary("add", &sa, &sb, |t, a, b| t.add(a, b).unwrap());
        check_binary("sub", &sa, &sb, |t, a, b| t.sub(a, b).unwrap());
        check_binary("mul", &sa, &sb, |t, a, b| t.mul(a, b).unwrap());
        check_binary("div", &sa, &sb, |t, a, b| t.div(a, b).unwrap());
    }
}

#[test]
fn elementwise_unary_gradients() {
    check_unary("neg", -2.0, 2.0, |t, x| t.neg(x).unwrap());
    check_unary("exp", -2.0, 2.0, |t, x| t.exp(x).unwrap());
    check_unary("log", 0.2, 3.0, |t, x| t.log(x).unwrap());
    check_unary("relu+", 0.1, 2.0, |t, x| t.relu(x).unwrap());
    check_unary("relu-", -2.0, -0.1, |t, x| t.relu(x).unwrap());
    check_unary("gelu", -3.0, 3.0, |t, x| t.gelu(x).unwrap());
    check_unary("softplus", -4.0, 4.0, |t, x| t.softplus(x).unwrap());
    check_unary("sqrt", 0.2, 3.0, |t, x| t.sqrt(x).unwrap());
    check_unary("powf", 0.2, 2.0, |t, x| t.powf(x, 2.5).unwrap());
    check_unary("powf-int", -2.0, 2.0, |t, x| t.powf(x, 3.0).unwrap());
    check_unary("scale", -2.0, 2.0, |t, x| t.scale(x, -1.7).unwrap());
    check_unary("add_scalar", -2.0, 2.0, |t, x| t.add_scalar(x, 0.3).unwrap());
}

#[test]
fn elementwise_selector_dispatches() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(Tensor::from_vec(vec![3.0, 5.0])).unwrap();
    let y = tape.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 10.0]);
    assert!(tape.elementwise(ElementwiseOp::Add, a, None).is_err());
    let e = tape.elementwise(ElementwiseOp::Exp, a, None).unwrap();
    assert_eq!(tape.value(e).data(), &[1f64.exp(), 2f64.exp()]);
}

#[test]
fn matmul_gradients() {
    for (sa, sb) in [
        (vec![3, 4], vec![4, 2]),
        (vec![2, 3, 4], vec![4, 5]),
        (vec![2, 3, 4], vec![2, 4, 2]),
        (vec![2, 1, 3, 4], vec![3, 4, 2]),
    ] {
        check_binary("matmul", &sa, &sb, |t, a, b| t.matmul(a, b).unwrap());
    }
}

#[test]
fn softmax_family_gradients() {
    let x = random_tensor(&mut rng(3), &[2, 3, 4], -2.0, 2.0);
    for axis in 0..3 {
        for (name, f) in [
            ("softmax", Tape::softmax as fn(&mut Tape, Var, usize) -> _),
            ("log_softmax", Tape::log_softmax),
            ("logsumexp", Tape::logsumexp),
        ] {
            let err = gradcheck(std::slice::from_ref(&x), |t, v| {
                let y = f(t, v[0], axis).unwrap();
                scalarize(t, y)
            });
            assert!(err < TOL, "{name} axis {axis}: {err}");
        }
    }
}

#[test]
fn reduction_gradients() {
    let x = random_tensor(&mut rng(4), &[2, 3, 4], -2.0, 2.0);
    for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
        for axis in [None, Some(0), Some(1), Some(2)] {
            for keep in [false, true] {
                let err = gradcheck(std::slice::from_ref(&x), |t, v| {
                    let y = t.reduce_keep(op, v[0], axis, keep).unwrap();
                    scalarize(t, y)
                });
                assert!(err < TOL, "{op:?} {axis:?} keep={keep}: {err}");
            }
        }
    }
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Var;

#[test]
fn shape_op_gradients() {
    let x = random_tensor(&mut rng(5), &[2, 3, 4], -2.0, 2.0);
    let y = random_tensor(&mut rng(6), &[2, 1, 4], -2.0, 2.0);
    let cases: Vec<(&str, Box<OpFn>)> = vec![
        ("reshape", Box::new(|t, v| t.reshape(v[0], &[6, 4]).unwrap())),
        ("permute", Box::new(|t, v| t.permute(v[0], &[2, 0, 1]).unwrap())),
        ("transpose", Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("narrow", Box::new(|t, v| t.narrow(v[0], 2, 1, 2).unwrap())),
        ("concat", Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], 1).unwrap())),
    ];
    for (name, f) in cases {
        let err = gradcheck(&[x.clone(), y.clone()], |t, v| {
            let out = f(t, v);
            scalarize(t, out)
        });
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn reused_inputs_accumulate() {
    let x = random_tensor(&mut rng(7), &[3, 3], -1.0, 1.0);
    let err = gradcheck(&[x], |t, v| {
        let a = t.matmul(v[0], v[0]).unwrap();
        let b = t.mul(a, v[0]).unwrap();
        let c = t.softmax(b, 1).unwrap();
        let d = t.add(c, v[0]).unwrap();
        scalarize(t, d)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let p = tape.param(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y, None).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
}

/// Random chain of shape-preserving smooth ops applied to `x` and mixed with `w`.
fn chain(tape: &mut Tape, x: Var, w: Var, ops: &[u8]) -> Var {
    let mut h = x;
    for &op in ops {
        h = match op % 9 {
            0 => tape.gelu(h).unwrap(),
            1 => tape.softplus(h).unwrap(),
            2 => {
                let s = tape.scale(h, 0.5).unwrap();
                tape.exp(s).unwrap()
            }
            3 => {
                let s = tape.softplus(h).unwrap();
                tape.log(s).unwrap()
            }
            4 => tape.softmax(h, 1).unwrap(),
            5 => {
                let wt = tape.transpose(w).unwrap();
                let m = tape.matmul(h, wt).unwrap();
                tape.matmul(m, w).unwrap()
            }
            6 => {
                let r = tape.narrow(w, 0, 0, 1).unwrap();
                tape.mul(h, r).unwrap()
            }
            7 => tape.log_softmax(h, 0).unwrap(),
            _ => {
                let m = tape.reduce_keep(ReduceOp::Mean, h, Some(1), true).unwrap();
                tape.sub(h, m).unwrap()
            }
        };
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_chains_match_finite_differences(
        rows in 1usize..4,
        cols in 1usize..4,
        ops in proptest::collection::vec(any::<u8>(), 1..5),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[rows, cols], -1.5, 1.5);
        let w = random_tensor(&mut r, &[2, cols], -1.0, 1.0);
        let err = gradcheck(&[x, w], |t, v| {
            let y = chain(t, v[0], v[1], &ops);
            scalarize(t, y)
        });
        prop_assert!(err < TOL, "ops {:?}: {}", ops, err);
    }

    #[test]
    fn broadcast_add_is_sum_of_parts(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[rows, cols], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cols], -1.0, 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()).unwrap(), tape.param(b.clone()).unwrap());
        let y = tape.add(va, vb).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(tape.value(y).at(&[i, j]), a.at(&[i, j]) + b.at(&[j]));
            }
        }
        let s = tape.sum(y, None).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(vb).unwrap().data().iter().all(|&g| g == rows as f64));
    }
}
