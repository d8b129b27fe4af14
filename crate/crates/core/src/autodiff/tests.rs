use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let p = ParamSet::<f64>::new();
    let mut tape = Tape::new(&p);
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).data(), &[0.5; 4]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let p = ParamSet::<f64>::new();
    let mut tape = Tape::new(&p);
    let x = tape.constant(Tensor::filled(&[1, 4], 3.7));
    let y = tape.softmax(x);
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn matmul_hand_computed() {
    // [[1,2,3],[4,5,6]] . [[1],[2],[3]] = [[14],[32]]
    let p = ParamSet::<f64>::new();
    let mut tape = Tape::new(&p);
    let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = tape.constant(Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[14.0, 32.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let p = ParamSet::<f64>::new();
    let mut tape = Tape::new(&p);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}", other = other.map(|v| v.id())),
    }
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, c).unwrap_err().to_string();
    assert!(
        err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"),
        "{err}"
    );
}

#[test]
fn backward_square_at_three() {
    let mut p = ParamSet::new();
    let x = p.add("x", Tensor::scalar(3.0));
    let mut tape = Tape::new(&p);
    let xv = tape.param(x);
    let y = tape.mul(xv, xv).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(x).data(), &[6.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut p = ParamSet::new();
    let x = p.add("x", Tensor::scalar(0.0));
    let mut tape = Tape::new(&p);
    let xv = tape.param(x);
    let y = tape.sigmoid(xv);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(x).data(), &[0.25]);
}

#[test]
fn backward_requires_scalar_and_zeroes_unreachable() {
    let mut p = ParamSet::new();
    let x = p.add("x", Tensor::row(vec![1.0, 2.0]));
    let unused = p.add("unused", Tensor::row(vec![5.0]));
    let mut tape = Tape::new(&p);
    let xv = tape.param(x);
    assert!(matches!(tape.backward(xv), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.param(x).data(), &[1.0, 1.0]);
    assert_eq!(g.param(unused).data(), &[0.0]);
}

#[test]
fn grad_check_sum_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let r = grad_check_inputs(
        &[x],
        |t, v| {
            let y = t.tanh(v[0]);
            Ok(t.sum(y))
        },
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn grad_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 5]);
    let r = grad_check_inputs(&[x], |t, v| Ok(t.sum(v[0])), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let x = Tensor::row(vec![1.0, 1e-6]);
    let err = grad_check_inputs(
        &[x],
        |t, v| {
            let y = t.log(v[0]);
            Ok(t.sum(y))
        },
        1e-5,
    )
    .unwrap_err();
    match err {
        Error::NonFinite { param, index } => {
            assert_eq!(param, "input0");
            assert_eq!(index, 1);
        }
        e => panic!("unexpected {e}"),
    }
}

/// Builds a scalar from one op application so every op kind can be checked
/// by the same harness. A fixed random projection keeps the upstream
/// gradient non-uniform.
fn op_scalar(t: &mut Tape<'_, f64>, kind: OpKind, vars: &[Var], weights: Var) -> crate::error::Result<Var> {
    let out = match kind {
        OpKind::Concat => t.apply(kind, vars, &Attrs::Axis(1))?,
        OpKind::Slice => t.apply(
            kind,
            &vars[..1],
            &Attrs::Slice {
                axis: 1,
                start: 1,
                len: 2,
            },
        )?,
        OpKind::Embedding => t.apply(kind, &vars[..1], &Attrs::Ids(vec![2, 0, 2]))?,
        OpKind::MatMul => t.apply(kind, vars, &Attrs::None)?,
        OpKind::Add | OpKind::Sub | OpKind::Mul => t.apply(kind, vars, &Attrs::None)?,
        _ => t.apply(kind, &vars[..1], &Attrs::None)?,
    };
    let w = t.value(weights).data().to_vec();
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let proj = t.constant(Tensor::new(shape, w[..n].to_vec()).unwrap());
    let prod = t.mul(out, proj)?;
    Ok(t.sum(prod))
}

#[test]
fn every_op_passes_grad_check_on_ten_seeds() {
    let kinds = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Embedding,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::L2Norm,
    ];
    for seed in 0..10u64 {
        for &kind in &kinds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 97 + kind as u64);
            let (a, b) = match kind {
                OpKind::MatMul => (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])),
                OpKind::Log => {
                    let t = rand_tensor(&mut rng, &[3, 4]);
                    let pos = t.data().iter().map(|x| x.abs() + 0.5).collect();
                    (Tensor::new(vec![3, 4], pos).unwrap(), rand_tensor(&mut rng, &[3, 4]))
                }
                _ => (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])),
            };
            let weights = rand_tensor(&mut rng, &[1, 24]);
            let r = grad_check_inputs(
                &[a, b],
                |t, v| {
                    let w = t.constant(weights.clone());
                    op_scalar(t, kind, v, w)
                },
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "{kind:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn log_softmax_exp_affine_pick_reshape_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5]);
    let r = grad_check_inputs(
        &[x],
        |t, v| {
            let ls = t.log_softmax(v[0]);
            let e = t.exp(v[0]);
            let a = t.affine(e, -0.3, 2.0);
            let s = t.add(ls, a)?;
            let r = t.reshape(s, &[5, 2])?;
            let p1 = t.pick(r, 3)?;
            let p2 = t.pick(r, 8)?;
            let bias = t.constant(Tensor::row(vec![0.5, -1.0]));
            let rb = t.add(r, bias)?;
            let m = t.l2_norm(rb);
            t.add_all(&[p1, p2, m])
        },
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn concat_backward_splits_upstream_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ParamSet::new();
    let a = p.add("a", rand_tensor(&mut rng, &[2, 3]));
    let b = p.add("b", rand_tensor(&mut rng, &[2, 2]));
    let upstream = rand_tensor(&mut rng, &[2, 5]);
    let mut tape = Tape::new(&p);
    let (av, bv) = (tape.param(a), tape.param(b));
    let c = tape.concat(&[av, bv], 1).unwrap();
    let u = tape.constant(upstream.clone());
    let m = tape.mul(c, u).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    let (ga, gb) = (g.param(a).data(), g.param(b).data());
    let mut joined = Vec::new();
    for r in 0..2 {
        joined.extend_from_slice(&ga[r * 3..r * 3 + 3]);
        joined.extend_from_slice(&gb[r * 2..r * 2 + 2]);
    }
    assert_eq!(joined.as_slice(), upstream.data());
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = ParamSet::new();
        let w = p.add_uniform("w", &[6, 6], 0.5, &mut rng);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let mut tape = Tape::new(&p);
        let wv = tape.param(w);
        let xv = tape.constant(x);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.tanh(h);
        let s = tape.softmax(h);
        tape.value(s).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_tape_runs() {
    let mut p = ParamSet::<f32>::new();
    let x = p.add("x", Tensor::scalar(3.0f32));
    let mut tape = Tape::new(&p);
    let xv = tape.param(x);
    let y = tape.mul(xv, xv).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(x).data(), &[6.0f32]);
}

proptest! {
    #[test]
    fn softmax_is_a_positive_distribution(xs in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
        let p = ParamSet::<f64>::new();
        let mut tape = Tape::new(&p);
        let x = tape.constant(Tensor::row(xs));
        let y = tape.softmax(x);
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(tape.value(y).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 2..20), c in -50.0f64..50.0) {
        let p = ParamSet::<f64>::new();
        let mut tape = Tape::new(&p);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = tape.constant(Tensor::row(xs));
        let b = tape.constant(Tensor::row(shifted));
        let (sa, sb) = (tape.softmax(a), tape.softmax(b));
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
