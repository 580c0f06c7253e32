//! Central-difference fuzz checks for every differentiable op and for the
//! full model at reduced width. Shared by the gradient suite and the
//! acceptance tests.

use super::{max_grad_error, random_vec, rel_err, rng, FdInput, FD_EPS};
use ctnext::model::{build_model, forward, Model, ModelConfig, StageConfig};
use ctnext::tensor::{Activation, Graph, NodeId, PoolKind, Tensor};
use rand::Rng;

/// One fuzzable op check: `run(seed)` returns the max relative error of the
/// analytic gradient against central differences.
pub struct OpCheck {
    pub name: &'static str,
    /// Pointwise ops are held to the tighter 1e-6 tolerance.
    pub tolerance: f64,
    pub run: fn(u64) -> f64,
}

fn scalarized<F>(inputs: &[FdInput], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    max_grad_error(inputs, |g, ids| {
        let out = op(g, ids);
        super::weighted_sum(g, out, seed)
    })
}

fn check_dense(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=4);
    let fin = r.random_range(2..=5);
    let fout = r.random_range(1..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![n, fin], -1.0, 1.0),
        FdInput::random(&mut r, vec![fin, fout], -1.0, 1.0),
        FdInput::random(&mut r, vec![fout], -0.5, 0.5),
    ];
    scalarized(&inputs, seed, |g, ids| g.dense(ids[0], ids[1], ids[2]).unwrap())
}

fn check_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let cin = r.random_range(1..=3);
    let cout = r.random_range(1..=3);
    let h = kh + r.random_range(2..=4);
    let w = kw + r.random_range(2..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![1, h, w, cin], -1.0, 1.0),
        FdInput::random(&mut r, vec![kh, kw, cin, cout], -1.0, 1.0),
    ];
    scalarized(&inputs, seed, move |g, ids| {
        g.conv2d(ids[0], ids[1], stride, pad).unwrap()
    })
}

fn check_depthwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let c = r.random_range(1..=4);
    let h = kh + r.random_range(2..=4);
    let w = kw + r.random_range(2..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![1, h, w, c], -1.0, 1.0),
        FdInput::random(&mut r, vec![kh, kw, c], -1.0, 1.0),
    ];
    scalarized(&inputs, seed, move |g, ids| {
        g.depthwise_conv2d(ids[0], ids[1], stride, pad).unwrap()
    })
}

fn check_bias_channels(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![2, 3, 2, c], -1.0, 1.0),
        FdInput::random(&mut r, vec![c], -0.5, 0.5),
    ];
    scalarized(&inputs, seed, |g, ids| g.bias_channels(ids[0], ids[1]).unwrap())
}

fn check_layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows = r.random_range(2..=4);
    let c = r.random_range(3..=6);
    let inputs = vec![
        FdInput::random(&mut r, vec![rows, c], -2.0, 2.0),
        FdInput::random(&mut r, vec![c], 0.5, 1.5),
        FdInput::random(&mut r, vec![c], -0.5, 0.5),
    ];
    scalarized(&inputs, seed, |g, ids| {
        g.layer_norm(ids[0], ids[1], ids[2], 1e-6).unwrap()
    })
}

fn check_gelu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = vec![FdInput::random(&mut r, vec![3, 5], -3.0, 3.0)];
    scalarized(&inputs, seed, |g, ids| g.activation(ids[0], Activation::Gelu).unwrap())
}

fn check_sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = vec![FdInput::random(&mut r, vec![3, 5], -4.0, 4.0)];
    scalarized(&inputs, seed, |g, ids| {
        g.activation(ids[0], Activation::Sigmoid).unwrap()
    })
}

fn check_global_avg(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = vec![FdInput::random(&mut r, vec![2, 3, 3, 2], -1.0, 1.0)];
    scalarized(&inputs, seed, |g, ids| {
        g.global_pool(ids[0], PoolKind::Avg).unwrap()
    })
}

fn check_global_max(seed: u64) -> f64 {
    let mut r = rng(seed);
    // Well-separated values keep finite differences away from tie points.
    let mut vals: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    let inputs = vec![FdInput::new(vec![2, 3, 3, 2], vals)];
    scalarized(&inputs, seed, |g, ids| {
        g.global_pool(ids[0], PoolKind::Max).unwrap()
    })
}

fn check_concat_mul_add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=3);
    let inputs = vec![
        FdInput::random(&mut r, vec![n, 2], -1.0, 1.0),
        FdInput::random(&mut r, vec![n, 3], -1.0, 1.0),
        FdInput::random(&mut r, vec![n, 5], -1.0, 1.0),
        FdInput::random(&mut r, vec![n, 5], -1.0, 1.0),
    ];
    scalarized(&inputs, seed, |g, ids| {
        let cat = g.concat(&[ids[0], ids[1]]).unwrap();
        let prod = g.mul(cat, ids[2]).unwrap();
        g.add(prod, ids[3]).unwrap()
    })
}

fn check_scale_channels(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(2..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![2, 3, c], -1.0, 1.0),
        FdInput::random(&mut r, vec![c], -1.0, 1.0),
    ];
    scalarized(&inputs, seed, |g, ids| g.scale_channels(ids[0], ids[1]).unwrap())
}

fn check_dropout(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = vec![FdInput::random(&mut r, vec![4, 6], -1.0, 1.0)];
    scalarized(&inputs, seed, move |g, ids| {
        g.dropout(ids[0], 0.3, true, seed ^ 0xd0).unwrap()
    })
}

fn check_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(3..=6);
    // Keep p away from the log's steep ends, where finite-difference
    // truncation alone exceeds the tolerance.
    let p = FdInput::random(&mut r, vec![n], 0.1, 0.9);
    let labels: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
    max_grad_error(&[p], |g, ids| {
        let y = g.leaf(Tensor::new(vec![labels.len()], labels.clone()));
        g.bce_loss(ids[0], y, (1.0, 1.0)).unwrap()
    })
}

fn check_composite_dense_gelu_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 3;
    let fin = 4;
    let inputs = vec![
        FdInput::random(&mut r, vec![n, fin], -1.0, 1.0),
        FdInput::random(&mut r, vec![fin, 1], -1.0, 1.0),
        FdInput::random(&mut r, vec![1], -0.2, 0.2),
    ];
    let labels: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
    max_grad_error(&inputs, |g, ids| {
        let lin = g.dense(ids[0], ids[1], ids[2]).unwrap();
        let act = g.activation(lin, Activation::Gelu).unwrap();
        let sig = g.activation(act, Activation::Sigmoid).unwrap();
        let p = g.reshape(sig, vec![labels.len()]).unwrap();
        let y = g.leaf(Tensor::new(vec![labels.len()], labels.clone()));
        g.bce_loss(p, y, (1.0, 1.0)).unwrap()
    })
}

fn check_attention_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(2..=3);
    let inputs = vec![
        FdInput::random(&mut r, vec![2, 3, 3, c], -1.0, 1.0),
        FdInput::random(&mut r, vec![1, 1, c, c], -1.0, 1.0),
        FdInput::random(&mut r, vec![c], -0.5, 0.5),
    ];
    scalarized(&inputs, seed, |g, ids| {
        ctnext::model::attention_pool(g, ids[0], ids[1], ids[2]).unwrap()
    })
}

fn check_feature_select(seed: u64) -> f64 {
    let mut r = rng(seed);
    let f = r.random_range(2..=4);
    let inputs = vec![
        FdInput::random(&mut r, vec![2, f], -1.0, 1.0),
        FdInput::random(&mut r, vec![f, f], -1.0, 1.0),
        FdInput::random(&mut r, vec![f], -0.5, 0.5),
    ];
    scalarized(&inputs, seed, |g, ids| {
        ctnext::model::feature_select(g, ids[0], ids[1], ids[2], ctnext::model::GateMode::Multiply)
            .unwrap()
    })
}

pub fn all_ops() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "dense", tolerance: 1e-5, run: check_dense },
        OpCheck { name: "conv2d", tolerance: 1e-5, run: check_conv2d },
        OpCheck { name: "depthwise_conv2d", tolerance: 1e-5, run: check_depthwise },
        OpCheck { name: "bias_channels", tolerance: 1e-6, run: check_bias_channels },
        OpCheck { name: "layer_norm", tolerance: 1e-5, run: check_layer_norm },
        OpCheck { name: "gelu", tolerance: 1e-6, run: check_gelu },
        OpCheck { name: "sigmoid", tolerance: 1e-6, run: check_sigmoid },
        OpCheck { name: "global_avg_pool", tolerance: 1e-6, run: check_global_avg },
        OpCheck { name: "global_max_pool", tolerance: 1e-6, run: check_global_max },
        OpCheck { name: "concat_mul_add", tolerance: 1e-6, run: check_concat_mul_add },
        OpCheck { name: "scale_channels", tolerance: 1e-6, run: check_scale_channels },
        OpCheck { name: "dropout", tolerance: 1e-6, run: check_dropout },
        OpCheck { name: "bce_loss", tolerance: 1e-6, run: check_bce },
        OpCheck { name: "dense_gelu_bce", tolerance: 1e-5, run: check_composite_dense_gelu_bce },
        OpCheck { name: "attention_pool", tolerance: 1e-5, run: check_attention_pool },
        OpCheck { name: "feature_select", tolerance: 1e-5, run: check_feature_select },
    ]
}

/// Reduced-width model used for the end-to-end gradient check.
pub fn mini_model_config() -> ModelConfig {
    ModelConfig {
        input_hw: (16, 16),
        stem_width: 4,
        stages: vec![
            StageConfig { blocks: 1, width: 4 },
            StageConfig { blocks: 1, width: 8 },
        ],
        head_hidden: 8,
        // A visible layer scale keeps block gradients well above the
        // finite-difference noise floor.
        layer_scale_init: 0.1,
        ..ModelConfig::default()
    }
}

/// End-to-end check: BCE loss of a 2-sample batch against every parameter
/// of the reduced-width model (train mode, fixed dropout stream).
pub fn full_model_grad_error(seed: u64) -> f64 {
    let cfg = mini_model_config();
    let model: Model<f64> = build_model(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xbeef);
    let batch_data = random_vec(&mut r, 2 * 16 * 16, 0.0, 1.0);
    let labels = vec![1.0, 0.0];
    let dropout_seed = 42;

    let loss_of = |m: &Model<f64>| -> f64 {
        let mut pass = forward(m, Tensor::new(vec![2, 16, 16, 1], batch_data.clone()), true, dropout_seed).unwrap();
        let y = pass.graph.leaf(Tensor::new(vec![2], labels.clone()));
        let loss = pass.graph.bce_loss(pass.probs, y, (1.0, 1.0)).unwrap();
        pass.graph.value(loss).item()
    };

    let mut pass = forward(
        &model,
        Tensor::new(vec![2, 16, 16, 1], batch_data.clone()),
        true,
        dropout_seed,
    )
    .unwrap();
    let y = pass.graph.leaf(Tensor::new(vec![2], labels.clone()));
    let loss = pass.graph.bce_loss(pass.probs, y, (1.0, 1.0)).unwrap();
    pass.graph.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (name, &id) in &pass.param_ids {
        let analytic = pass.graph.grad(id).expect("param gradient").to_vec();
        for coord in 0..analytic.len() {
            let mut perturbed = model.clone();
            perturbed.params.get_mut(name).unwrap().data[coord] += FD_EPS;
            let plus = loss_of(&perturbed);
            perturbed.params.get_mut(name).unwrap().data[coord] -= 2.0 * FD_EPS;
            let minus = loss_of(&perturbed);
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[coord], numeric));
        }
    }
    worst
}
