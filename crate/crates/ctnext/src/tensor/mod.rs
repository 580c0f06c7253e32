//! Dense N-D arrays with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape of recorded operations; every op appends a node
//! holding its output value, and [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients into the leaves that requested them.
//! The engine is generic over [`Real`] so training runs in `f32` while
//! gradient checks run an `f64` shadow path.

mod kernels;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Scalar type the engine computes in.
pub trait Real:
    Float + num_traits::FromPrimitive + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    fn erf(self) -> Self;
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Real for f32 {
    /// Abramowitz-Stegun 7.1.26 rational approximation, max abs error
    /// ~6e-7: within a few ulps of erff over the activation range and
    /// several times faster, which matters on the hot GELU path.
    fn erf(self) -> Self {
        let sign = if self < 0.0 { -1.0f32 } else { 1.0 };
        let x = self.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let poly = t * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        sign * (1.0 - poly * (-x * x).exp())
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument in {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

type Result<V> = std::result::Result<V, TensorError>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape"
        );
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![], vec![v])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::from_f64_c(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() requires a single element");
        self.data[0]
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

enum Op<T> {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    BiasChannels {
        x: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu {
        x: NodeId,
        /// Normal CDF at each input, cached when backward will need it.
        cdf: Option<Vec<T>>,
    },
    Sigmoid {
        x: NodeId,
    },
    GlobalPool {
        x: NodeId,
        kind: PoolKind,
        /// Flat spatial index of the first maximum per (n, c); Max only.
        argmax: Option<Vec<u32>>,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        gamma: NodeId,
    },
    Dropout {
        x: NodeId,
        /// Multiplicative mask (0 or 1/(1-rate)); `None` in eval mode.
        mask: Option<Vec<T>>,
    },
    Reshape {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    BceLoss {
        p: NodeId,
        y: NodeId,
        weights: (f64, f64),
    },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations over [`Tensor`] values.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let needs_grad = tensor.requires_grad;
        self.push(Node {
            value: tensor,
            needs_grad,
            op: Op::Leaf,
        })
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn insert(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.needs(inputs);
        Ok(self.push(Node {
            value,
            needs_grad,
            op,
        }))
    }

    /// `y = x W + b` for `x: [N, Fin]`, `w: [Fin, Fout]`, `b: [Fout]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xs.shape.len() != 2 || ws.shape.len() != 2 || bs.shape.len() != 1
            || xs.shape[1] != ws.shape[0] || ws.shape[1] != bs.shape[0]
        {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("x {:?}, w {:?}, b {:?}", xs.shape, ws.shape, bs.shape),
            });
        }
        let (n, fin, fout) = (xs.shape[0], xs.shape[1], ws.shape[1]);
        let mut out = vec![T::zero(); n * fout];
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(&bs.data);
        }
        kernels::gemm_accum(&xs.data, n, fin, &ws.data, fout, &mut out);
        let value = Tensor::new(vec![n, fout], out);
        self.insert(Op::Dense { x, w, b }, value, &[x, w, b], "dense")
    }

    /// Cross-correlation of `x: [N, H, W, Cin]` with `k: [kh, kw, Cin, Cout]`,
    /// zero padding, no kernel flip.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ks) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let value = kernels::conv2d_forward(xs, ks, stride, pad)?;
        self.insert(Op::Conv2d { x, k, stride, pad }, value, &[x, k], "conv2d")
    }

    /// Per-channel cross-correlation of `x: [N, H, W, C]` with `k: [kh, kw, C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ks) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let value = kernels::depthwise_forward(xs, ks, stride, pad)?;
        self.insert(
            Op::DepthwiseConv2d { x, k, stride, pad },
            value,
            &[x, k],
            "depthwise_conv2d",
        )
    }

    /// Adds a per-channel bias `b: [C]` over the last axis of `x`.
    pub fn bias_channels(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = *xs.shape.last().unwrap_or(&0);
        if c == 0 || bs.shape.len() != 1 || bs.shape[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channels",
                detail: format!("x {:?}, b {:?}", xs.shape, bs.shape),
            });
        }
        let mut out = xs.data.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bs.data) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(xs.shape.clone(), out);
        self.insert(Op::BiasChannels { x, b }, value, &[x, b], "bias_channels")
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (xs, gs, bs) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let c = *xs.shape.last().unwrap_or(&0);
        if c == 0 || gs.shape != vec![c] || bs.shape != vec![c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", xs.shape, gs.shape, bs.shape),
            });
        }
        let value = kernels::layer_norm_forward(xs, &gs.data, &bs.data, eps);
        self.insert(
            Op::LayerNorm { x, gamma, beta, eps },
            value,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Gelu => self.gelu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    /// Exact-erf GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        let needs = self.nodes[x.0].needs_grad;
        let half = T::from_f64_c(0.5);
        let inv_sqrt2 = T::from_f64_c(std::f64::consts::FRAC_1_SQRT_2);
        let mut out = Vec::with_capacity(xs.data.len());
        let mut cdf_cache = if needs {
            Some(Vec::with_capacity(xs.data.len()))
        } else {
            None
        };
        for &v in &xs.data {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            if let Some(cache) = cdf_cache.as_mut() {
                cache.push(cdf);
            }
            out.push(v * cdf);
        }
        let value = Tensor::new(xs.shape.clone(), out);
        self.insert(Op::Gelu { x, cdf: cdf_cache }, value, &[x], "gelu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        let out = xs
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(xs.shape.clone(), out);
        self.insert(Op::Sigmoid { x }, value, &[x], "sigmoid")
    }

    /// Pools `x: [N, H, W, C]` over the spatial axes to `[N, C]`.
    ///
    /// Max pooling routes its gradient to the first maximal cell in
    /// row-major order.
    pub fn global_pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "global_pool",
                detail: format!("expected [N,H,W,C], got {:?}", xs.shape),
            });
        }
        let needs = self.nodes[x.0].needs_grad;
        let (n, h, w, c) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
        let hw = h * w;
        let mut out = vec![T::zero(); n * c];
        let mut argmax = if kind == PoolKind::Max && needs {
            Some(vec![0u32; n * c])
        } else {
            None
        };
        match kind {
            PoolKind::Avg => {
                let scale = T::one() / T::from_f64_c(hw as f64);
                for ni in 0..n {
                    let base = ni * hw * c;
                    let orow = &mut out[ni * c..(ni + 1) * c];
                    for p in 0..hw {
                        let xrow = &xs.data[base + p * c..base + (p + 1) * c];
                        for (o, &v) in orow.iter_mut().zip(xrow) {
                            *o = *o + v;
                        }
                    }
                    for o in orow.iter_mut() {
                        *o = *o * scale;
                    }
                }
            }
            PoolKind::Max => {
                for ni in 0..n {
                    let base = ni * hw * c;
                    for ci in 0..c {
                        let mut best = xs.data[base + ci];
                        let mut best_p = 0u32;
                        for p in 1..hw {
                            let v = xs.data[base + p * c + ci];
                            if v > best {
                                best = v;
                                best_p = p as u32;
                            }
                        }
                        out[ni * c + ci] = best;
                        if let Some(am) = argmax.as_mut() {
                            am[ni * c + ci] = best_p;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c], out);
        self.insert(Op::GlobalPool { x, kind, argmax }, value, &[x], "global_pool")
    }

    /// Concatenates `[N, Fi]` tensors along the feature axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: "empty input list".into(),
            });
        }
        let n = self.nodes[xs[0].0].value.shape.first().copied().unwrap_or(0);
        let mut total = 0;
        for id in xs {
            let s = &self.nodes[id.0].value.shape;
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("expected [{n}, *], got {s:?}"),
                });
            }
            total += s[1];
        }
        let mut out = vec![T::zero(); n * total];
        let mut offset = 0;
        for id in xs {
            let v = &self.nodes[id.0].value;
            let f = v.shape[1];
            for row in 0..n {
                out[row * total + offset..row * total + offset + f]
                    .copy_from_slice(&v.data[row * f..(row + 1) * f]);
            }
            offset += f;
        }
        let value = Tensor::new(vec![n, total], out);
        self.insert(Op::Concat { xs: xs.to_vec() }, value, xs, "concat")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", av.shape, bv.shape),
            });
        }
        let out = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape.clone(), out);
        self.insert(Op::Mul { a, b }, value, &[a, b], "mul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.shape, bv.shape),
            });
        }
        let out = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape.clone(), out);
        self.insert(Op::Add { a, b }, value, &[a, b], "add")
    }

    /// Scales the last axis of `x` by per-channel factors `gamma: [C]`.
    pub fn scale_channels(&mut self, x: NodeId, gamma: NodeId) -> Result<NodeId> {
        let (xs, gs) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value);
        let c = *xs.shape.last().unwrap_or(&0);
        if c == 0 || gs.shape.len() != 1 || gs.shape[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                detail: format!("x {:?}, gamma {:?}", xs.shape, gs.shape),
            });
        }
        let mut out = xs.data.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, &g) in row.iter_mut().zip(&gs.data) {
                *o = *o * g;
            }
        }
        let value = Tensor::new(xs.shape.clone(), out);
        self.insert(Op::ScaleChannels { x, gamma }, value, &[x, gamma], "scale_channels")
    }

    /// Inverted dropout: in train mode zeroes with probability `rate` and
    /// scales survivors by `1/(1-rate)`; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let xs = &self.nodes[x.0].value;
        if !train || rate == 0.0 {
            let value = xs.clone();
            return self.insert(Op::Dropout { x, mask: None }, value, &[x], "dropout");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = T::from_f64_c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..xs.data.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = xs.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xs.shape.clone(), out);
        self.insert(Op::Dropout { x, mask: Some(mask) }, value, &[x], "dropout")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xs.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", xs.shape, shape),
            });
        }
        let value = Tensor::new(shape, xs.data.clone());
        self.insert(Op::Reshape { x }, value, &[x], "reshape")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        let total = xs.data.iter().copied().fold(T::zero(), |acc, v| acc + v);
        let value = Tensor::scalar(total);
        self.insert(Op::SumAll { x }, value, &[x], "sum_all")
    }

    /// Mean binary cross-entropy with per-class weights; probabilities are
    /// clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&mut self, p: NodeId, y: NodeId, class_weights: (f64, f64)) -> Result<NodeId> {
        let (ps, ys) = (&self.nodes[p.0].value, &self.nodes[y.0].value);
        if ps.shape.len() != 1 || ps.shape != ys.shape || ps.data.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("p {:?}, y {:?}", ps.shape, ys.shape),
            });
        }
        let lo = T::from_f64_c(1e-7);
        let hi = T::one() - lo;
        let mut total = T::zero();
        for (&pv, &yv) in ps.data.iter().zip(&ys.data) {
            let pc = pv.max(lo).min(hi);
            let w = if yv > T::from_f64_c(0.5) {
                T::from_f64_c(class_weights.1)
            } else {
                T::from_f64_c(class_weights.0)
            };
            let term = yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln();
            total = total - w * term;
        }
        let value = Tensor::scalar(total / T::from_f64_c(ps.data.len() as f64));
        self.insert(
            Op::BceLoss { p, y, weights: class_weights },
            value,
            &[p, y],
            "bce_loss",
        )
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<T> {
        let numel = self.nodes[id.0].value.numel();
        self.grads[id.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn add_grad(&mut self, id: NodeId, delta: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (g, &d) in buf.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into any
    /// existing buffers (repeated calls sum); leaves that require gradients
    /// but were never reached end up with zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape.clone(),
            ));
        }
        // Seed all requires-grad leaves so unused ones report zeros.
        for i in 0..self.nodes.len() {
            if self.nodes[i].needs_grad && matches!(self.nodes[i].op, Op::Leaf) {
                self.grad_buf(NodeId(i));
            }
        }
        let mut sweep: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        sweep[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = sweep[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.add_grad(NodeId(i), &dy);
                continue;
            }
            self.op_backward(i, &dy, &mut sweep)?;
        }
        Ok(())
    }

    fn sweep_buf<'a>(
        &self,
        sweep: &'a mut [Option<Vec<T>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        Some(sweep[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.numel()]))
    }

    fn op_backward(&self, i: usize, dy: &[T], sweep: &mut [Option<Vec<T>>]) -> Result<()> {
        // Split borrows: the op description is read-only here.
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = &self.nodes[x.0].value;
                let ws = &self.nodes[w.0].value;
                let (n, fin, fout) = (xs.shape[0], xs.shape[1], ws.shape[1]);
                if self.nodes[x.0].needs_grad {
                    let wt = kernels::transpose(&ws.data, fin, fout);
                    let mut dx = vec![T::zero(); n * fin];
                    kernels::gemm_accum(dy, n, fout, &wt, fin, &mut dx);
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, &dx);
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); fin * fout];
                    kernels::gemm_at_b(&xs.data, n, fin, dy, fout, &mut dw);
                    if let Some(buf) = self.sweep_buf(sweep, w) {
                        kernels::axpy(buf, &dw);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks_exact(fout) {
                        kernels::axpy(&mut db, row);
                    }
                    if let Some(buf) = self.sweep_buf(sweep, b) {
                        kernels::axpy(buf, &db);
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = &self.nodes[x.0].value;
                let ks = &self.nodes[k.0].value;
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_backward_input(xs, ks, dy, stride, pad);
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, &dx);
                    }
                }
                if self.nodes[k.0].needs_grad {
                    let dk = kernels::conv2d_backward_kernel(xs, ks, dy, stride, pad);
                    if let Some(buf) = self.sweep_buf(sweep, k) {
                        kernels::axpy(buf, &dk);
                    }
                }
            }
            Op::DepthwiseConv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = &self.nodes[x.0].value;
                let ks = &self.nodes[k.0].value;
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::depthwise_backward_input(xs, ks, dy, stride, pad);
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, &dx);
                    }
                }
                if self.nodes[k.0].needs_grad {
                    let dk = kernels::depthwise_backward_kernel(xs, ks, dy, stride, pad);
                    if let Some(buf) = self.sweep_buf(sweep, k) {
                        kernels::axpy(buf, &dk);
                    }
                }
            }
            Op::BiasChannels { x, b } => {
                let (x, b) = (*x, *b);
                let c = *self.nodes[b.0].value.shape.last().unwrap();
                if self.nodes[x.0].needs_grad {
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, dy);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); c];
                    for row in dy.chunks_exact(c) {
                        kernels::axpy(&mut db, row);
                    }
                    if let Some(buf) = self.sweep_buf(sweep, b) {
                        kernels::axpy(buf, &db);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xs = &self.nodes[x.0].value;
                let gs = &self.nodes[gamma.0].value;
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(xs, &gs.data, dy, eps);
                if self.nodes[x.0].needs_grad {
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, &dx);
                    }
                }
                if self.nodes[gamma.0].needs_grad {
                    if let Some(buf) = self.sweep_buf(sweep, gamma) {
                        kernels::axpy(buf, &dgamma);
                    }
                }
                if self.nodes[beta.0].needs_grad {
                    if let Some(buf) = self.sweep_buf(sweep, beta) {
                        kernels::axpy(buf, &dbeta);
                    }
                }
            }
            Op::Gelu { x, cdf } => {
                let x = *x;
                let xs = &self.nodes[x.0].value;
                let cdf = cdf.as_ref().expect("gelu cache present when grad needed");
                let inv_sqrt_2pi = T::from_f64_c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64_c(0.5);
                let dx: Vec<T> = xs
                    .data
                    .iter()
                    .zip(cdf)
                    .zip(dy)
                    .map(|((&v, &c), &g)| {
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                        g * (c + v * pdf)
                    })
                    .collect();
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    kernels::axpy(buf, &dx);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let ys = &self.nodes[i].value;
                let dx: Vec<T> = ys
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    kernels::axpy(buf, &dx);
                }
            }
            Op::GlobalPool { x, kind, argmax } => {
                let x = *x;
                let xs = &self.nodes[x.0].value;
                let (n, h, w, c) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
                let hw = h * w;
                let mut dx = vec![T::zero(); xs.numel()];
                match kind {
                    PoolKind::Avg => {
                        let scale = T::one() / T::from_f64_c(hw as f64);
                        for ni in 0..n {
                            let dyr = &dy[ni * c..(ni + 1) * c];
                            let base = ni * hw * c;
                            for p in 0..hw {
                                let row = &mut dx[base + p * c..base + (p + 1) * c];
                                for (d, &g) in row.iter_mut().zip(dyr) {
                                    *d = *d + g * scale;
                                }
                            }
                        }
                    }
                    PoolKind::Max => {
                        let am = argmax.as_ref().expect("argmax cached when grad needed");
                        for ni in 0..n {
                            let base = ni * hw * c;
                            for ci in 0..c {
                                let p = am[ni * c + ci] as usize;
                                dx[base + p * c + ci] = dx[base + p * c + ci] + dy[ni * c + ci];
                            }
                        }
                    }
                }
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    kernels::axpy(buf, &dx);
                }
            }
            Op::Concat { xs } => {
                let xs = xs.clone();
                let n = self.nodes[xs[0].0].value.shape[0];
                let total: usize = xs.iter().map(|id| self.nodes[id.0].value.shape[1]).sum();
                let mut offset = 0;
                for id in xs {
                    let f = self.nodes[id.0].value.shape[1];
                    if self.nodes[id.0].needs_grad {
                        let mut dxi = vec![T::zero(); n * f];
                        for row in 0..n {
                            dxi[row * f..(row + 1) * f]
                                .copy_from_slice(&dy[row * total + offset..row * total + offset + f]);
                        }
                        if let Some(buf) = self.sweep_buf(sweep, id) {
                            kernels::axpy(buf, &dxi);
                        }
                    }
                    offset += f;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let bv = &self.nodes[b.0].value;
                    let da: Vec<T> = dy.iter().zip(&bv.data).map(|(&g, &v)| g * v).collect();
                    if let Some(buf) = self.sweep_buf(sweep, a) {
                        kernels::axpy(buf, &da);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = &self.nodes[a.0].value;
                    let db: Vec<T> = dy.iter().zip(&av.data).map(|(&g, &v)| g * v).collect();
                    if let Some(buf) = self.sweep_buf(sweep, b) {
                        kernels::axpy(buf, &db);
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for id in [a, b] {
                    if self.nodes[id.0].needs_grad {
                        if let Some(buf) = self.sweep_buf(sweep, id) {
                            kernels::axpy(buf, dy);
                        }
                    }
                }
            }
            Op::ScaleChannels { x, gamma } => {
                let (x, gamma) = (*x, *gamma);
                let c = self.nodes[gamma.0].value.shape[0];
                if self.nodes[x.0].needs_grad {
                    let gs = &self.nodes[gamma.0].value;
                    let mut dx = vec![T::zero(); dy.len()];
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                        for ((d, &g), &gm) in drow.iter_mut().zip(grow).zip(&gs.data) {
                            *d = g * gm;
                        }
                    }
                    if let Some(buf) = self.sweep_buf(sweep, x) {
                        kernels::axpy(buf, &dx);
                    }
                }
                if self.nodes[gamma.0].needs_grad {
                    let xs = &self.nodes[x.0].value;
                    let mut dg = vec![T::zero(); c];
                    for (xrow, grow) in xs.data.chunks_exact(c).zip(dy.chunks_exact(c)) {
                        for ((d, &xv), &g) in dg.iter_mut().zip(xrow).zip(grow) {
                            *d = *d + xv * g;
                        }
                    }
                    if let Some(buf) = self.sweep_buf(sweep, gamma) {
                        kernels::axpy(buf, &dg);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<T> = match mask {
                    Some(mask) => dy.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    None => dy.to_vec(),
                };
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    kernels::axpy(buf, &dx);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    kernels::axpy(buf, dy);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                let g = dy[0];
                if let Some(buf) = self.sweep_buf(sweep, x) {
                    for v in buf.iter_mut() {
                        *v = *v + g;
                    }
                }
            }
            Op::BceLoss { p, y, weights } => {
                let (p, y, weights) = (*p, *y, *weights);
                let ps = &self.nodes[p.0].value;
                let ys = &self.nodes[y.0].value;
                let lo = T::from_f64_c(1e-7);
                let hi = T::one() - lo;
                let n_inv = T::from_f64_c(1.0 / ps.data.len() as f64);
                let g = dy[0];
                let dp: Vec<T> = ps
                    .data
                    .iter()
                    .zip(&ys.data)
                    .map(|(&pv, &yv)| {
                        if pv <= lo || pv >= hi {
                            // Clamp is active: flat region, zero derivative.
                            return T::zero();
                        }
                        let w = if yv > T::from_f64_c(0.5) {
                            T::from_f64_c(weights.1)
                        } else {
                            T::from_f64_c(weights.0)
                        };
                        g * w * n_inv * (pv - yv) / (pv * (T::one() - pv))
                    })
                    .collect();
                if let Some(buf) = self.sweep_buf(sweep, p) {
                    kernels::axpy(buf, &dp);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
