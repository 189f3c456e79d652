use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn relu_clamps_negatives() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn identity_matmul_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&[3, 5], &mut rng);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut t = Tape::new();
    let (i, av) = (t.constant(eye), t.constant(a.clone()));
    let out = t.matmul(i, av).unwrap();
    assert_eq!(t.value(out), &a);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.l2_normalize(x);
    let d = t.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
}

#[test]
fn mse_gradient_is_two_x_over_n() {
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![1.0, 2.0]));
    let zero = t.constant(Tensor::zeros(&[2]));
    let loss = t.mse(x, zero).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
}

#[test]
fn unused_parameter_gets_no_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::vector(vec![1.0, 2.0]));
    let unused = store.add("unused", Tensor::vector(vec![3.0]));
    let mut t = Tape::with_params(&store);
    let u = t.param(used);
    let _ = t.param(unused);
    let loss = t.sum(u);
    let g = t.backward(loss).unwrap();
    assert!(g.param(unused).is_none());
    assert_eq!(g.norm_over(&[unused]), 0.0);
    assert_eq!(g.param(used).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn frozen_parameters_do_not_receive_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0]));
    let b = store.add("b", Tensor::vector(vec![2.0]));
    let mut t = Tape::with_params(&store).train_only([a]);
    let (va, vb) = (t.param(a), t.param(b));
    let prod = t.mul(va, vb).unwrap();
    let loss = t.sum(prod);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.param(a).unwrap().data(), &[2.0]);
    assert!(g.param(b).is_none());
}

#[test]
fn second_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![1.0]));
    let loss = t.sum(x);
    t.backward(loss).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Usage(_))));
}

#[test]
fn shape_errors_name_the_operation() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert!(shapes.contains("[2, 3]"));
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
    let b = t_const(&mut t, &[3, 2]);
    assert!(t.add(a, b).is_err());
    assert!(t.slice(a, 2, 2).is_err());
}

fn t_const(t: &mut Tape<'_>, shape: &[usize]) -> Var {
    t.constant(Tensor::zeros(shape))
}

#[test]
fn l2_normalize_below_floor_stays_finite() {
    let f = |t: &mut Tape<'_>, x: Var| {
        let y = t.l2_normalize(x);
        Ok(t.sum(y))
    };
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![1e-12, -3e-12, 0.0]));
    let out = f(&mut t, x).unwrap();
    let g = t.backward(out).unwrap().wrt(x);
    assert!(g.is_finite());
    assert_eq!(g.data()[0], 1e8);
    // gradient at the floor is the constant-denominator rule
    assert!(grad_check(f, &Tensor::vector(vec![1e-12, 2e-12]), 1e-14).unwrap() < 1e-4);
}

#[test]
fn cosine_of_zero_vector_is_zero_with_finite_gradient() {
    let mut t = Tape::new();
    let a = t.input(Tensor::vector(vec![0.0, 0.0]));
    let b = t.input(Tensor::vector(vec![1.0, 1.0]));
    let c = t.cosine(a, b).unwrap();
    let s = t.sum(c);
    assert_eq!(t.value(s).item(), 0.0);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(a).is_finite() && g.wrt(b).is_finite());
}

#[test]
fn softmax_ce_is_stable_for_large_logits() {
    let mut t = Tape::new();
    let l = t.input(Tensor::matrix(1, 3, vec![1000.0, 0.0, -1000.0]).unwrap());
    let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(t.value(ce).item().abs() < 1e-12);
    let g = t.backward(ce).unwrap();
    assert!(g.wrt(l).is_finite());
}

#[test]
fn softmax_ce_rejects_out_of_range_label() {
    let mut t = Tape::new();
    let l = t.input(Tensor::zeros(&[2, 3]));
    assert!(t.softmax_cross_entropy(l, &[0, 3]).is_err());
    assert!(t.softmax_cross_entropy(l, &[0]).is_err());
}

#[test]
fn power_normalize_projects_onto_budget() {
    let mut t = Tape::new();
    // row 0: ‖x‖² = 16 = 4k for k = 4, row 1 already feasible
    let x = t.constant(Tensor::matrix(2, 4, vec![2.0, 2.0, 2.0, 2.0, 0.5, 0.5, 0.5, 0.5]).unwrap());
    let y = t.power_normalize(x, 4.0);
    let v = t.value(y);
    assert_eq!(v.row(0), &[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(v.row(1), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn complex_gain_rotates() {
    let mut t = Tape::new();
    // x = 1 + 2i, h = i  ->  -2 + i
    let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let y = t.complex_gain(x, &[[0.0, 1.0]]).unwrap();
    assert_eq!(t.value(y).data(), &[-2.0, 1.0]);
}

#[test]
fn sum_of_squares_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[3], &mut rng);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_function_gradcheck_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[2, 3], &mut rng);
    let w = uniform(&[3, 2], &mut rng);
    let err = grad_check(
        |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w)?;
            let y = t.scale(y, 0.5);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

/// A random two-layer MLP: gradients w.r.t. the input and both weight
/// matrices agree with central differences.
#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&[4, 6], &mut rng);
    let w1 = uniform(&[6, 8], &mut rng);
    let b1 = uniform(&[8], &mut rng);
    let w2 = uniform(&[8, 3], &mut rng);
    let mlp = |t: &mut Tape<'_>, x: Var, w1: Var, w2: Var| -> crate::Result<Var> {
        let b1 = t.constant(b1.clone());
        let h = t.matmul(x, w1)?;
        let h = t.add_bias(h, b1)?;
        let h = t.relu(h);
        let y = t.matmul(h, w2)?;
        t.softmax_cross_entropy(y, &[0, 2, 1, 0])
    };
    let e_x = grad_check(
        |t, v| {
            let (a, b) = (t.constant(w1.clone()), t.constant(w2.clone()));
            mlp(t, v, a, b)
        },
        &x,
        1e-5,
    )
    .unwrap();
    let e_w1 = grad_check(
        |t, v| {
            let (a, b) = (t.constant(x.clone()), t.constant(w2.clone()));
            mlp(t, a, v, b)
        },
        &w1,
        1e-5,
    )
    .unwrap();
    let e_w2 = grad_check(
        |t, v| {
            let (a, b) = (t.constant(x.clone()), t.constant(w1.clone()));
            mlp(t, a, b, v)
        },
        &w2,
        1e-5,
    )
    .unwrap();
    assert!(e_x < 1e-6 && e_w1 < 1e-6 && e_w2 < 1e-6, "{e_x} {e_w1} {e_w2}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&[5, 7], &mut rng);
        let w = uniform(&[7, 4], &mut rng);
        let mut t = Tape::new();
        let (x, w) = (t.input(x), t.input(w));
        let h = t.matmul(x, w).unwrap();
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let h = t.layer_norm(h, g, b).unwrap();
        let n = t.l2_normalize(h);
        let loss = t.mean(n);
        let grads = t.backward(loss).unwrap();
        (t.value(loss).item().to_bits(), grads.wrt(w).into_data())
    };
    assert_eq!(run(), run());
}
