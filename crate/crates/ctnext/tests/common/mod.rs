//! Shared test machinery: central-difference gradient checking against the
//! f64 graph path, plus seeded random data helpers.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use ctnext::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect()
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// One differentiable input to a gradient check.
#[derive(Clone)]
pub struct FdInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl FdInput {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        let data = random_vec(rng, n, lo, hi);
        Self { shape, data }
    }
}

/// Checks analytic gradients of a scalar-valued graph builder against
/// central finite differences at `FD_EPS`, returning the max relative error
/// over every coordinate of every input.
pub fn max_grad_error<F>(inputs: &[FdInput], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|inp| g.leaf(Tensor::new(inp.shape.clone(), inp.data.clone()).with_grad()))
        .collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "gradient check needs a scalar");
    g.backward(loss).expect("backward succeeds");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("input gradient present").to_vec())
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> f64 {
        let mut g2 = Graph::new();
        let ids2: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(k, inp)| {
                let mut data = inp.data.clone();
                if k == which {
                    data[coord] += delta;
                }
                g2.leaf(Tensor::new(inp.shape.clone(), data))
            })
            .collect();
        let loss2 = build(&mut g2, &ids2);
        g2.value(loss2).item()
    };

    let mut worst = 0.0f64;
    for (which, inp) in inputs.iter().enumerate() {
        for coord in 0..inp.data.len() {
            let plus = eval(which, coord, FD_EPS);
            let minus = eval(which, coord, -FD_EPS);
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[which][coord], numeric));
        }
    }
    worst
}

/// Reduces a tensor to a scalar through fixed random weights, so the check
/// is sensitive to every output coordinate.
pub fn weighted_sum(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let numel = g.value(out).numel();
    let shape = g.value(out).shape.clone();
    let mut r = rng(seed ^ 0x5eed_0001);
    let w = g.leaf(Tensor::new(shape, random_vec(&mut r, numel, -1.0, 1.0)));
    let prod = g.mul(out, w).expect("same shape");
    g.sum_all(prod).expect("scalar")
}
