use alloc::vec;
use alloc::vec::Vec;

use approx::assert_abs_diff_eq;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_by_identity_is_noop() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x);
    assert_eq!(tape.value(y), &[0.25; 4]);
}

#[test]
fn conv1d_output_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 500]));
    let w = tape.constant(Tensor::zeros(&[3, 10]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv1d(x, w, b, 5).unwrap();
    assert_eq!(tape.shape(y), &[1, 99, 3]);
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, -1.0, 0.5, 0.5]));
    let b = tape.constant(t(&[2], &[0.0, 1.0]));
    let y = tape.conv1d(x, w, b, 2).unwrap();
    // windows (1,2) (3,4) (5,6)
    assert_eq!(tape.value(y), &[-1.0, 2.5, -1.0, 4.5, -1.0, 6.5]);
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let msg = alloc::format!("{err}");
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.var(t(&[3], &[0.3, -1.0, 2.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0));
    let y = tape.var(Tensor::scalar(3.0));
    let p = tape.mul(x, y).unwrap();
    tape.backward(p).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    assert_eq!(tape.grad(y).unwrap(), &[2.0]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    tape.backward(s).unwrap();
    assert_abs_diff_eq!(tape.grad(x).unwrap()[0], 0.25, epsilon = 1e-15);
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::zeros(&[2]));
    let y = tape.exp(x);
    assert_eq!(tape.backward(y), Err(TensorError::NonScalarRoot(vec![2])));
}

#[test]
fn repeated_backward_accumulates_and_reset_is_bit_identical() {
    let mut tape = Tape::new();
    let x = tape.var(t(&[2, 2], &[0.1, -0.4, 1.3, 0.7]));
    let w = tape.var(t(&[2, 1], &[0.5, -2.0]));
    let h = tape.matmul(x, w).unwrap();
    let s = tape.sigmoid(h);
    let root = tape.sum(s);
    tape.backward(root).unwrap();
    let first: Vec<f64> = tape.grad(w).unwrap().to_vec();
    tape.backward(root).unwrap();
    let twice: Vec<f64> = tape.grad(w).unwrap().to_vec();
    for (a, b) in first.iter().zip(&twice) {
        assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-15);
    }
    tape.zero_grad();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(w).unwrap(), first.as_slice());
}

#[test]
fn untracked_constants_get_no_adjoint() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let x = tape.var(t(&[2], &[3.0, 4.0]));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn parameter_reuse_shares_one_leaf() {
    let mut store = ParameterStore::new();
    let id = store.insert("w", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    tape.backward(p).unwrap();
    assert_eq!(tape.param_grads(&store).get(id), &[6.0]);
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        store.insert("w", Tensor::scalar(2.0)),
        Err(TensorError::DuplicateName(_))
    ));
}

#[test]
fn grad_check_quadratic_form() {
    let mut store = ParameterStore::new();
    let x = store.insert("x", t(&[3, 1], &[0.4, -1.2, 0.9])).unwrap();
    let a = t(&[3, 3], &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0]);
    let report = grad_check(
        |tape, s| {
            let xv = tape.param(s, x);
            let av = tape.constant(a.clone());
            let ax = tape.matmul(av, xv)?;
            let q = tape.mul(xv, ax)?;
            Ok(tape.sum(q))
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.entries_checked, 3);
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn grad_check_of_constant_is_zero() {
    let mut store = ParameterStore::new();
    store.insert("x", t(&[2], &[1.0, 2.0])).unwrap();
    let report = grad_check(|tape, _| Ok(tape.scalar_constant(4.2)), &store, 1e-5).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn grad_check_reports_offending_parameter() {
    let mut store = ParameterStore::new();
    store.insert("bad", t(&[1], &[-1.0])).unwrap();
    let id = store.id("bad").unwrap();
    let err = grad_check(
        |tape, s| {
            let v = tape.param(s, id);
            let l = tape.log(v);
            Ok(tape.sum(l))
        },
        &store,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { .. }));
}

#[test]
fn split_and_merge_heads_are_inverse() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..24).map(f64::from).collect();
    let x = tape.constant(t(&[2, 3, 4], &data));
    let s = tape.split_heads(x, 2).unwrap();
    assert_eq!(tape.shape(s), &[4, 3, 2]);
    // sample 0, head 1, position 0 holds features 2..4 of row 0
    assert_eq!(&tape.value(s)[6..8], &[2.0, 3.0]);
    let m = tape.merge_heads(s, 2).unwrap();
    assert_eq!(tape.value(m), data.as_slice());
}

#[test]
fn max_pool_drops_remainder() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 5, 1], &[1.0, 3.0, 2.0, 0.0, 9.0]));
    let y = tape.max_pool(x, 2).unwrap();
    assert_eq!(tape.value(y), &[3.0, 2.0]);
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]));
    let g = tape.constant(Tensor::filled(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).chunks(4) {
        let m: f64 = row.iter().sum::<f64>() / 4.0;
        let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-4);
    }
}

#[test]
fn trace_and_broadcast() {
    let mut tape = Tape::new();
    let x = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let tr = tape.trace(x).unwrap();
    assert_eq!(tape.item(tr), 5.0);
    let b = tape.broadcast(tr, &[3]).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 0.0, 0.0, 3.0]);
}
