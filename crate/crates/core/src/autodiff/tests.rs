use super::*;
use crate::autodiff::gradcheck::{finite_diff, relative_error};

fn mat(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(mat(&[&[0.0, 0.0]])).row_softmax().unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(6, 9, |i, j| ((i * 7 + j * 3) % 11) as f64 * 3.1 - 12.0);
    let y = tape.constant(x).row_softmax().unwrap().value();
    for i in 0..6 {
        let s: f64 = (0..9).map(|j| y.at(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cosine_of_scaled_vector_is_one() {
    let tape = Tape::<f64>::new();
    let v = Tensor::from_fn(5, 1, |i, _| (i as f64 - 1.7) * 0.9);
    let a = tape.constant(v.clone());
    let b = tape.constant(v.scale(2.0));
    assert!((a.cosine_similarity(b).unwrap().item() - 1.0).abs() < 1e-14);
}

#[test]
fn layernorm_rows_are_standardized() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(4, 8, |i, j| ((i * 13 + j * 5) % 7) as f64 * 0.8 + i as f64);
    let y = tape.constant(x).row_layernorm(0.0).unwrap().value();
    for i in 0..4 {
        let row: Vec<f64> = (0..8).map(|j| y.at(i, j)).collect();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_values_and_gradient() {
    let tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::column(&[0.0, 0.0]));
    let ce = cross_entropy_softmax(l, 0).unwrap();
    assert!((ce.item() - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.grad(ce, &[l]).unwrap();
    assert_eq!(g[0].data(), &[-0.5, 0.5]);

    let l = tape.constant(Tensor::column(&[10.0, -10.0]));
    let ce = cross_entropy_softmax(l, 0).unwrap().item();
    // log(1 + e^-20)
    let expected = (-20.0f64).exp().ln_1p();
    assert!((ce - expected).abs() / expected < 1e-6);
    assert!((ce - 2.061e-9).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::column(&[0.0, 0.0, 1.0]));
    assert!(matches!(
        cross_entropy_softmax(l, 3),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn derivative_of_square() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.square().unwrap();
    assert_eq!(tape.grad(y, &[x]).unwrap()[0].item(), 6.0);
}

#[test]
fn second_derivative_of_cube() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = x.square().unwrap().mul(x).unwrap();
    let dy = tape.grad_graph(y, &[x]).unwrap()[0];
    assert_eq!(dy.item(), 12.0);
    let d2y = tape.grad(dy, &[x]).unwrap();
    assert!((d2y[0].item() - 12.0).abs() < 1e-12);
}

#[test]
fn quadratic_form_gradient_matches_oracle() {
    let a = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![2.0, 0.1, -0.4], vec![-0.5, 0.9, 1.1]]);
    let x0 = Tensor::column(&[0.4, -0.8, 1.3]);
    let f = |x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let ax = tape.constant(a.clone()).matmul(tape.constant(x.clone()))?;
        Ok(ax.frobenius_sq()?.item())
    };
    let tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone());
    let loss = tape.constant(a.clone()).matmul(x).unwrap().frobenius_sq().unwrap();
    let g = tape.grad(loss, &[x]).unwrap().remove(0);
    let fd = finite_diff(f, &x0, 1e-5).unwrap();
    assert!(relative_error(&g, &fd) < 1e-8);
    // closed form 2 A^T A x
    let expected = a.transpose().unwrap().matmul(&a).unwrap().matmul(&x0).unwrap().scale(2.0);
    assert!(relative_error(&g, &expected) < 1e-13);
}

#[test]
fn terminal_backward_leaves_tape_untouched() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(2, 2, |i, j| (i + j) as f64));
    let y = x.square().unwrap().sum().unwrap();
    let before = tape.len();
    tape.grad(y, &[x]).unwrap();
    assert_eq!(tape.len(), before);
    tape.grad_graph(y, &[x]).unwrap();
    assert!(tape.len() > before);
}

#[test]
fn unreached_input_gets_zero_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let z = tape.leaf(Tensor::from_fn(2, 3, |_, _| 1.0));
    let y = x.square().unwrap();
    let g = tape.grad(y, &[x, z]).unwrap();
    assert_eq!(g[1], Tensor::zeros(&[2, 3]));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(2, 2, |_, _| 1.0));
    assert!(matches!(tape.grad(x, &[x]), Err(Error::NotScalar(_))));
}

#[test]
fn foreign_nodes_are_rejected() {
    let a = Tape::<f64>::new();
    let b = Tape::<f64>::new();
    let x = a.leaf(Tensor::scalar(1.0));
    let y = b.leaf(Tensor::scalar(1.0));
    assert!(matches!(x.add(y), Err(Error::UnknownNode(_))));
    let s = x.square().unwrap();
    assert!(matches!(b.grad(s, &[y]), Err(Error::UnknownNode(_))));
}

#[test]
fn non_finite_fails_at_producing_op() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    assert!(matches!(x.log(), Err(Error::NonFinite { op: "log" })));
    assert!(matches!(x.recip(), Err(Error::NonFinite { op: "recip" })));
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(a), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(3, 4, |i, j| (i as f64 * 0.37 - j as f64 * 0.21).sin()));
        let w = tape.constant(Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.5));
        let y = x.matmul(w).unwrap().row_softmax().unwrap().gelu().unwrap().frobenius_sq().unwrap();
        let g = tape.grad(y, &[x]).unwrap();
        (y.item().to_bits(), g[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn tape_records_topological_order() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(2, 2, |i, j| (i * 2 + j) as f64));
    let y = x.matmul(x.t().unwrap()).unwrap().row_softmax().unwrap().sum().unwrap();
    tape.grad_graph(y, &[x]).unwrap();
    for id in 0..tape.len() {
        for input in tape.inputs(id).unwrap() {
            assert!(input < id);
        }
    }
    assert_eq!(tape.op_kind(x.id()), Some(OpKind::Leaf));
}

#[test]
fn works_in_single_precision() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::column(&[0.5f32, -1.0, 2.0]));
    let y = x.gelu().unwrap().frobenius_sq().unwrap();
    let g = tape.grad(y, &[x]).unwrap();
    assert!(g[0].all_finite());
}
