use super::*;

fn leaf64(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
    g.leaf(Tensor::new(shape, data))
}

#[test]
fn dense_identity_weights_pass_input_through() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let w = leaf64(
        &mut g,
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    );
    let b = leaf64(&mut g, vec![3], vec![0.0; 3]);
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data, g.value(x).data);
}

#[test]
fn dense_zero_input_broadcasts_bias() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3], vec![0.0; 6]);
    let w = leaf64(&mut g, vec![3, 2], vec![0.5; 6]);
    let b = leaf64(&mut g, vec![2], vec![7.0, -2.0]);
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data, vec![7.0, -2.0, 7.0, -2.0]);
}

#[test]
fn dense_rejects_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3], vec![0.0; 6]);
    let w = leaf64(&mut g, vec![4, 2], vec![0.0; 8]);
    let b = leaf64(&mut g, vec![2], vec![0.0; 2]);
    assert!(matches!(
        g.dense(x, w, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn conv2d_one_by_one_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1, 2, 2, 2], (0..8).map(f64::from).collect());
    // [1,1,2,2] identity over channels.
    let k = leaf64(&mut g, vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).data, g.value(x).data);
}

#[test]
fn conv2d_all_ones_sums_window() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1, 2, 2, 1], vec![1.0; 4]);
    let k = leaf64(&mut g, vec![2, 2, 1, 1], vec![1.0; 4]);
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape, vec![1, 1, 1, 1]);
    assert_eq!(g.value(y).data, vec![4.0]);
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1, 3, 3, 2], (0..18).map(f64::from).collect());
    // 3x3 delta centered, pad 1.
    let mut kdata = vec![0.0; 9 * 2];
    kdata[4 * 2] = 1.0;
    kdata[4 * 2 + 1] = 1.0;
    let k = leaf64(&mut g, vec![3, 3, 2], kdata);
    let y = g.depthwise_conv2d(x, k, 1, 1).unwrap();
    assert_eq!(g.value(y).data, g.value(x).data);
}

#[test]
fn depthwise_channels_are_independent() {
    let x_data: Vec<f64> = (0..16).map(|i| (i + 1) as f64 * 0.3).collect();
    let run = |k0: f64| {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1, 2, 4, 2], x_data.clone());
        let k = leaf64(&mut g, vec![1, 1, 2], vec![k0, 2.0]);
        let y = g.depthwise_conv2d(x, k, 1, 0).unwrap();
        g.value(y).data.clone()
    };
    let a = run(1.0);
    let b = run(5.0);
    // Channel 1 outputs (odd indices) unchanged when channel 0 kernel moves.
    for i in (1..16).step_by(2) {
        assert_eq!(a[i], b[i]);
    }
    assert_ne!(a[0], b[0]);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1, 4], vec![3.5; 4]);
    let gamma = leaf64(&mut g, vec![4], vec![1.0; 4]);
    let beta = leaf64(&mut g, vec![4], vec![0.0; 4]);
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    for &v in &g.value(y).data {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn layer_norm_zero_gamma_returns_beta() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 4.0, 9.0]);
    let gamma = leaf64(&mut g, vec![3], vec![0.0; 3]);
    let beta = leaf64(&mut g, vec![3], vec![5.0; 3]);
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).data.iter().all(|&v| v == 5.0));
}

#[test]
fn gelu_and_sigmoid_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1], vec![0.0]);
    let ge = g.gelu(x).unwrap();
    let si = g.sigmoid(x).unwrap();
    assert_eq!(g.value(ge).data[0], 0.0);
    assert_eq!(g.value(si).data[0], 0.5);
}

#[test]
fn sigmoid_is_symmetric() {
    let xs: Vec<f64> = vec![-3.25, -1.0, -0.1, 0.7, 2.5];
    let mut g = Graph::<f64>::new();
    let pos = leaf64(&mut g, vec![5], xs.clone());
    let neg = leaf64(&mut g, vec![5], xs.iter().map(|v| -v).collect());
    let sp = g.sigmoid(pos).unwrap();
    let sn = g.sigmoid(neg).unwrap();
    for (a, b) in g.value(sp).data.iter().zip(&g.value(sn).data) {
        assert!((a + b - 1.0).abs() < 1e-15);
    }
}

#[test]
fn f32_erf_tracks_f64_reference() {
    for i in -400..=400 {
        let x = i as f32 * 0.01;
        let approx = Real::erf(x);
        let exact = libm::erf(x as f64) as f32;
        assert!(
            (approx - exact).abs() < 1e-6,
            "erf({x}) = {approx}, want {exact}"
        );
    }
}

#[test]
fn global_pool_avg_and_max() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![1, 2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]);
    let avg = g.global_pool(x, PoolKind::Avg).unwrap();
    let max = g.global_pool(x, PoolKind::Max).unwrap();
    assert_eq!(g.value(avg).data, vec![4.0]);
    assert_eq!(g.value(max).data, vec![7.0]);
}

#[test]
fn global_pool_constant_map_avg_equals_max() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3, 3, 2], vec![0.25; 36]);
    let avg = g.global_pool(x, PoolKind::Avg).unwrap();
    let max = g.global_pool(x, PoolKind::Max).unwrap();
    assert_eq!(g.value(avg).data, g.value(max).data);
}

#[test]
fn concat_of_single_tensor_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2, 3], (0..6).map(f64::from).collect());
    let y = g.concat(&[x]).unwrap();
    assert_eq!(g.value(y).data, g.value(x).data);
}

#[test]
fn concat_preserves_order() {
    let mut g = Graph::<f64>::new();
    let a = leaf64(&mut g, vec![2, 1], vec![1.0, 2.0]);
    let b = leaf64(&mut g, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
    let y = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(y).shape, vec![2, 3]);
    assert_eq!(g.value(y).data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
}

#[test]
fn dropout_rate_zero_and_eval_mode_are_identity() {
    let data: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![10], data.clone());
    let train_zero = g.dropout(x, 0.0, true, 1).unwrap();
    let eval_half = g.dropout(x, 0.5, false, 1).unwrap();
    assert_eq!(g.value(train_zero).data, data);
    assert_eq!(g.value(eval_half).data, data);
}

#[test]
fn dropout_is_deterministic_per_seed() {
    let data = vec![1.0f64; 64];
    let run = |seed: u64| {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![64], data.clone());
        let y = g.dropout(x, 0.3, true, seed).unwrap();
        g.value(y).data.clone()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn bce_matching_predictions_have_tiny_loss() {
    let mut g = Graph::<f64>::new();
    let p = leaf64(&mut g, vec![4], vec![1.0, 0.0, 1.0, 0.0]);
    let y = leaf64(&mut g, vec![4], vec![1.0, 0.0, 1.0, 0.0]);
    let loss = g.bce_loss(p, y, (1.0, 1.0)).unwrap();
    assert!(g.value(loss).item() < 1e-6);
}

#[test]
fn bce_at_half_is_ln_two() {
    let mut g = Graph::<f64>::new();
    let p = leaf64(&mut g, vec![8], vec![0.5; 8]);
    let y = leaf64(&mut g, vec![8], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let loss = g.bce_loss(p, y, (1.0, 1.0)).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).with_grad());
    let loss = g.sum_all(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_twice_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).with_grad());
    let loss = g.sum_all(x).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
    assert!(matches!(
        g.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn unused_leaves_get_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
    let unused = g.leaf(Tensor::new(vec![3], vec![0.0; 3]).with_grad());
    let loss = g.sum_all(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = leaf64(&mut g, vec![2], vec![1e308, 1e308]);
    let y = g.add(x, x).unwrap_err();
    assert!(matches!(y, TensorError::NonFinite { .. }));
}

#[test]
fn max_pool_ties_route_to_first_in_row_major_order() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 2, 2, 1], vec![5.0, 5.0, 5.0, 5.0]).with_grad());
    let y = g.global_pool(x, PoolKind::Max).unwrap();
    let loss = g.sum_all(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}
