use reform_autodiff::{AutodiffError, Tape, Tensor, TensorOf};

#[test]
fn identity_matmul_is_a_no_op() {
    let mut t = Tape::<f32>::new();
    let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let x = Tensor::from_fn(vec![2, 5], |i| i as f32 * 0.3 - 1.0);
    let xv = t.constant(x.clone()).unwrap();
    let y = t.matmul(eye, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn instance_norm_of_constant_channel_is_zero() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![1, 2, 4, 4], 0.37)).unwrap();
    let y = t.instance_norm(x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_of_ones_center_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
    let k = t.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
    let y = t.conv2d(x, k, 1, 1).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    // Direct summation: the centre window covers all nine ones, corners four.
    let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
    assert_eq!(out.data(), &expected);
}

#[test]
fn mse_of_identical_inputs_has_zero_gradient() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::from_fn(vec![3, 2], |i| i as f32)).unwrap();
    let l = t.mse(x, x).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_of_doubled_input_has_gradient_two() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::from_fn(vec![4], |i| i as f32)).unwrap();
    let y = t.scale(x, 2.0).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 2.0));
}

#[test]
fn reused_nodes_accumulate_gradients() {
    // l = sum(x + x + x) -> dl/dx = 3
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(vec![3])).unwrap();
    let a = t.add(x, x).unwrap();
    let b = t.add(a, x).unwrap();
    let l = t.sum(b).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 3.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(vec![3])).unwrap();
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn shape_mismatch_is_descriptive() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(vec![3, 2])).unwrap();
    let err = t.add(a, b).unwrap_err();
    assert!(err.to_string().contains("shape mismatch"), "{err}");
    let c = t.constant(Tensor::zeros(vec![4, 2])).unwrap();
    assert!(t.matmul(a, c).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![2], 3e38)).unwrap();
    assert!(matches!(t.scale(x, 10.0), Err(AutodiffError::NonFinite { .. })));
    assert!(t.constant(Tensor::full(vec![1], f32::NAN)).is_err());
}

#[test]
fn constants_are_not_differentiated() {
    let mut t = Tape::<f32>::new();
    let c = t.constant(Tensor::ones(vec![2])).unwrap();
    let p = t.param(Tensor::ones(vec![2])).unwrap();
    let y = t.mul(c, p).unwrap();
    assert!(!t.requires_grad(c));
    assert!(t.requires_grad(y));
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(p).data(), &[1.0, 1.0]);
}

#[test]
fn conv_stride_two_output_shape() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(vec![2, 3, 32, 32])).unwrap();
    let k = t.constant(Tensor::zeros(vec![8, 3, 3, 3])).unwrap();
    let y = t.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[2, 8, 16, 16]);
    assert!(t.conv2d(x, k, 3, 1).is_err());
}

#[test]
fn softplus_and_bce_are_stable_for_large_logits() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(TensorOf::new(vec![2], vec![80.0, -80.0]).unwrap()).unwrap();
    let y = t.softplus(x).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 80.0).abs() < 1e-12 && v[1] > 0.0 && v[1] < 1e-30);
}
