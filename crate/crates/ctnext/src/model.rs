//! The classifier: a compact ConvNeXt-style backbone (4x4 stem, depthwise
//! 7x7 blocks with layer norm, 4x MLP expansion, layer scale and residuals)
//! feeding three parallel pooling branches — global average, global max,
//! and attention-weighted pooling — whose concatenation passes a sigmoid
//! feature-selection gate and a small dense head to a single probability.

use crate::dataio::{Checkpoint, CheckpointMeta, ParamEntry};
use crate::tensor::{Activation, Graph, NodeId, PoolKind, Real, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match model: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Gate output multiplies the concatenated vector (default).
    Multiply,
    /// Gate output replaces the concatenated vector.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_hw: (usize, usize),
    pub stem_kernel: usize,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub dw_kernel: usize,
    pub expansion: usize,
    pub layer_scale_init: f64,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub gate_mode: GateMode,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_hw: (250, 250),
            stem_kernel: 4,
            stem_width: 24,
            stages: vec![
                StageConfig { blocks: 2, width: 24 },
                StageConfig { blocks: 2, width: 48 },
            ],
            dw_kernel: 7,
            expansion: 4,
            layer_scale_init: 1e-6,
            head_hidden: 64,
            head_dropout: 0.3,
            gate_mode: GateMode::Multiply,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.width == 0) {
            return bad("stage blocks and widths must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_width == 0 || self.expansion == 0 {
            return bad("stem and expansion sizes must be positive".into());
        }
        if self.head_hidden == 0 {
            return bad("head width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.head_dropout));
        }
        if self.dw_kernel % 2 == 0 {
            return bad("depthwise kernel must be odd".into());
        }
        let (fh, fw) = self.feature_hw();
        if fh == 0 || fw == 0 {
            return bad(format!(
                "input {:?} too small for stem and downsampling",
                self.input_hw
            ));
        }
        Ok(())
    }

    /// Spatial size of the backbone output feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let reduce = |mut v: usize| {
            if v < self.stem_kernel {
                return 0;
            }
            v = (v - self.stem_kernel) / self.stem_kernel + 1;
            for _ in 1..self.stages.len() {
                if v < 2 {
                    return 0;
                }
                v = (v - 2) / 2 + 1;
            }
            v
        };
        (reduce(self.input_hw.0), reduce(self.input_hw.1))
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map(|s| s.width).unwrap_or(0)
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// SHA-256 over the canonical JSON encoding; stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named parameter store plus per-parameter trainable flags.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub trainable: BTreeMap<String, bool>,
}

fn truncated_normal<T: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0f64, std).expect("valid normal");
    (0..n)
        .map(|_| {
            loop {
                let v = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64_c(v);
                }
            }
        })
        .collect()
}

/// Builds a model with deterministic initialization: truncated-normal
/// weights with `std = sqrt(2 / fan_in)`, zero biases, unit layer-norm
/// gains, and layer-scale set to its configured epsilon.
pub fn build_model<T: Real>(config: &ModelConfig, init_seed: u64) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();

    let conv = |params: &mut BTreeMap<String, Tensor<T>>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    shape: Vec<usize>,
                    fan_in: usize| {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(format!("{name}.weight"), Tensor::new(shape.clone(), truncated_normal(rng, n, std)));
        let out = *shape.last().unwrap();
        params.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
    };
    let norm = |params: &mut BTreeMap<String, Tensor<T>>, name: &str, c: usize| {
        params.insert(format!("{name}.gamma"), Tensor::new(vec![c], vec![T::one(); c]));
        params.insert(format!("{name}.beta"), Tensor::zeros(vec![c]));
    };

    let k = config.stem_kernel;
    let c0 = config.stem_width;
    conv(&mut params, &mut rng, "stem.conv", vec![k, k, 1, c0], k * k);
    norm(&mut params, "stem.norm", c0);

    let mut prev_width = c0;
    for (si, stage) in config.stages.iter().enumerate() {
        if si > 0 {
            let name = format!("downsample.{}", si - 1);
            norm(&mut params, &format!("{name}.norm"), prev_width);
            conv(
                &mut params,
                &mut rng,
                &format!("{name}.conv"),
                vec![2, 2, prev_width, stage.width],
                4 * prev_width,
            );
        } else if stage.width != c0 {
            return Err(ModelError::InvalidConfig(
                "first stage width must equal the stem width".into(),
            ));
        }
        let c = stage.width;
        let dk = config.dw_kernel;
        for b in 0..stage.blocks {
            let p = format!("stages.{si}.blocks.{b}");
            let n_dw = dk * dk * c;
            let std = (2.0 / (dk * dk) as f64).sqrt();
            params.insert(
                format!("{p}.dwconv.weight"),
                Tensor::new(vec![dk, dk, c], truncated_normal(&mut rng, n_dw, std)),
            );
            params.insert(format!("{p}.dwconv.bias"), Tensor::zeros(vec![c]));
            norm(&mut params, &format!("{p}.norm"), c);
            conv(&mut params, &mut rng, &format!("{p}.pw1"), vec![c, c * config.expansion], c);
            conv(
                &mut params,
                &mut rng,
                &format!("{p}.pw2"),
                vec![c * config.expansion, c],
                c * config.expansion,
            );
            params.insert(
                format!("{p}.layerscale.gamma"),
                Tensor::new(vec![c], vec![T::from_f64_c(config.layer_scale_init); c]),
            );
        }
        prev_width = stage.width;
    }
    let c_out = config.feature_channels();
    norm(&mut params, "final_norm", c_out);

    conv(
        &mut params,
        &mut rng,
        "head.attn.conv",
        vec![1, 1, c_out, c_out],
        c_out,
    );
    let gate_w = 3 * c_out;
    conv(&mut params, &mut rng, "head.gate", vec![gate_w, gate_w], gate_w);
    conv(
        &mut params,
        &mut rng,
        "head.dense1",
        vec![gate_w, config.head_hidden],
        gate_w,
    );
    norm(&mut params, "head.norm", config.head_hidden);
    conv(
        &mut params,
        &mut rng,
        "head.out",
        vec![config.head_hidden, 1],
        config.head_hidden,
    );

    let trainable = params.keys().map(|k| (k.clone(), true)).collect();
    Ok(Model {
        config: config.clone(),
        params,
        trainable,
    })
}

impl<T: Real> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn to_param_entries(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|&v| v.to_f64_c() as f32).collect(),
            })
            .collect()
    }

    pub fn checkpoint_meta(&self, phase: u8, epoch: u32, val_loss: f64, val_auc: f64) -> CheckpointMeta {
        CheckpointMeta {
            phase,
            epoch,
            val_loss,
            val_auc,
            config_hash: self.config.hash(),
        }
    }

    /// Restores parameters from a checkpoint, requiring an identical
    /// parameter set, shapes, and config hash.
    pub fn apply_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        if ckpt.meta.config_hash != self.config.hash() {
            return Err(ModelError::ConfigMismatch(format!(
                "config hash {} != {}",
                ckpt.meta.config_hash,
                self.config.hash()
            )));
        }
        if ckpt.params.len() != self.params.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "parameter count {} != {}",
                ckpt.params.len(),
                self.params.len()
            )));
        }
        for entry in &ckpt.params {
            let Some(t) = self.params.get(&entry.name) else {
                return Err(ModelError::ConfigMismatch(format!(
                    "unexpected parameter {}",
                    entry.name
                )));
            };
            if t.shape != entry.shape {
                return Err(ModelError::ConfigMismatch(format!(
                    "{} has shape {:?}, checkpoint holds {:?}",
                    entry.name, t.shape, entry.shape
                )));
            }
        }
        for entry in &ckpt.params {
            let t = self.params.get_mut(&entry.name).unwrap();
            t.data = entry.data.iter().map(|&v| T::from_f64_c(v as f64)).collect();
        }
        Ok(())
    }

    /// Copies the backbone (non-head) parameters from another model of the
    /// same config; head parameters keep their current values.
    pub fn adopt_backbone(&mut self, source: &Model<T>) -> Result<(), ModelError> {
        if source.config != self.config {
            return Err(ModelError::ConfigMismatch(
                "backbone transfer requires identical configs".into(),
            ));
        }
        for (name, tensor) in &source.params {
            if !name.starts_with("head.") {
                self.params.insert(name.clone(), tensor.clone());
            }
        }
        Ok(())
    }
}

/// Phase 1 freezes the whole backbone and trains only the head; phase 2
/// additionally unfreezes the upper half of the blocks (global block index
/// >= floor(total/2)), the downsample feeding them, and the final backbone
/// norm.
pub fn set_phase_trainability<T: Real>(model: &mut Model<T>, phase: u8) {
    let cutoff = model.config.total_blocks() / 2;
    // Global index of the first block in each stage.
    let mut stage_starts = Vec::with_capacity(model.config.stages.len());
    let mut acc = 0;
    for s in &model.config.stages {
        stage_starts.push(acc);
        acc += s.blocks;
    }
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let trainable = if name.starts_with("head.") {
            true
        } else if phase < 2 {
            false
        } else if name == "final_norm.gamma" || name == "final_norm.beta" {
            true
        } else if let Some(rest) = name.strip_prefix("stages.") {
            let mut it = rest.split('.');
            let si: usize = it.next().unwrap().parse().unwrap();
            let bi: usize = it.nth(1).unwrap().parse().unwrap();
            stage_starts[si] + bi >= cutoff
        } else if let Some(rest) = name.strip_prefix("downsample.") {
            let di: usize = rest.split('.').next().unwrap().parse().unwrap();
            stage_starts[di + 1] >= cutoff
        } else {
            false // stem stays frozen in both phases
        };
        model.trainable.insert(name, trainable);
    }
}

/// Attention-weighted pooling: a 1x1 convolution produces a sigmoid mask
/// over every channel and position, the mask multiplies the features, and
/// the product is average-pooled.
pub fn attention_pool<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    conv_w: NodeId,
    conv_b: NodeId,
) -> Result<NodeId, TensorError> {
    let scores = g.conv2d(features, conv_w, 1, 0)?;
    let scores = g.bias_channels(scores, conv_b)?;
    let mask = g.activation(scores, Activation::Sigmoid)?;
    let weighted = g.mul(mask, features)?;
    g.global_pool(weighted, PoolKind::Avg)
}

/// Feature-selection gate: sigmoid projection of the branch concatenation,
/// applied multiplicatively (or replacing the vector under
/// [`GateMode::Replace`]).
pub fn feature_select<T: Real>(
    g: &mut Graph<T>,
    v: NodeId,
    w: NodeId,
    b: NodeId,
    mode: GateMode,
) -> Result<NodeId, TensorError> {
    let proj = g.dense(v, w, b)?;
    let gate = g.activation(proj, Activation::Sigmoid)?;
    match mode {
        GateMode::Multiply => g.mul(gate, v),
        GateMode::Replace => Ok(gate),
    }
}

/// A recorded forward pass: the graph plus the node ids needed to attach a
/// loss and read gradients.
pub struct ForwardPass<T: Real> {
    pub graph: Graph<T>,
    pub param_ids: BTreeMap<String, NodeId>,
    pub features: NodeId,
    pub probs: NodeId,
}

/// Runs the model on a `[N, H, W, 1]` batch.
///
/// In train mode dropout is active (seeded) and parameters marked trainable
/// enter the graph with gradients enabled.
pub fn forward<T: Real>(
    model: &Model<T>,
    batch: Tensor<T>,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<ForwardPass<T>, ModelError> {
    let cfg = &model.config;
    if batch.shape.len() != 4
        || batch.shape[1] != cfg.input_hw.0
        || batch.shape[2] != cfg.input_hw.1
        || batch.shape[3] != 1
    {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            detail: format!(
                "expected [N, {}, {}, 1], got {:?}",
                cfg.input_hw.0, cfg.input_hw.1, batch.shape
            ),
        }
        .into());
    }
    let n = batch.shape[0];
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, tensor) in &model.params {
        let mut t = tensor.clone();
        t.requires_grad = model.trainable[name];
        ids.insert(name.clone(), g.leaf(t));
    }
    let p = |ids: &BTreeMap<String, NodeId>, name: &str| ids[name];

    let x = g.leaf(batch);
    let mut cur = g.conv2d(x, p(&ids, "stem.conv.weight"), cfg.stem_kernel, 0)?;
    cur = g.bias_channels(cur, p(&ids, "stem.conv.bias"))?;
    cur = g.layer_norm(cur, p(&ids, "stem.norm.gamma"), p(&ids, "stem.norm.beta"), cfg.ln_eps)?;

    for (si, stage) in cfg.stages.iter().enumerate() {
        if si > 0 {
            let d = format!("downsample.{}", si - 1);
            cur = g.layer_norm(
                cur,
                p(&ids, &format!("{d}.norm.gamma")),
                p(&ids, &format!("{d}.norm.beta")),
                cfg.ln_eps,
            )?;
            cur = g.conv2d(cur, p(&ids, &format!("{d}.conv.weight")), 2, 0)?;
            cur = g.bias_channels(cur, p(&ids, &format!("{d}.conv.bias")))?;
        }
        let c = stage.width;
        for b in 0..stage.blocks {
            let pre = format!("stages.{si}.blocks.{b}");
            let input = cur;
            let pad = cfg.dw_kernel / 2;
            let mut t = g.depthwise_conv2d(input, p(&ids, &format!("{pre}.dwconv.weight")), 1, pad)?;
            t = g.bias_channels(t, p(&ids, &format!("{pre}.dwconv.bias")))?;
            t = g.layer_norm(
                t,
                p(&ids, &format!("{pre}.norm.gamma")),
                p(&ids, &format!("{pre}.norm.beta")),
                cfg.ln_eps,
            )?;
            // Pointwise convolutions as dense layers over flattened positions.
            let (sh, sw) = {
                let s = &g.value(t).shape;
                (s[1], s[2])
            };
            let rows = n * sh * sw;
            t = g.reshape(t, vec![rows, c])?;
            t = g.dense(t, p(&ids, &format!("{pre}.pw1.weight")), p(&ids, &format!("{pre}.pw1.bias")))?;
            t = g.activation(t, Activation::Gelu)?;
            t = g.dense(t, p(&ids, &format!("{pre}.pw2.weight")), p(&ids, &format!("{pre}.pw2.bias")))?;
            t = g.reshape(t, vec![n, sh, sw, c])?;
            t = g.scale_channels(t, p(&ids, &format!("{pre}.layerscale.gamma")))?;
            cur = g.add(input, t)?;
        }
    }
    let features = g.layer_norm(
        cur,
        p(&ids, "final_norm.gamma"),
        p(&ids, "final_norm.beta"),
        cfg.ln_eps,
    )?;

    let gap = g.global_pool(features, PoolKind::Avg)?;
    let gmp = g.global_pool(features, PoolKind::Max)?;
    let att = attention_pool(
        &mut g,
        features,
        p(&ids, "head.attn.conv.weight"),
        p(&ids, "head.attn.conv.bias"),
    )?;
    let branches = g.concat(&[gap, gmp, att])?;
    let gated = feature_select(
        &mut g,
        branches,
        p(&ids, "head.gate.weight"),
        p(&ids, "head.gate.bias"),
        cfg.gate_mode,
    )?;
    let mut h = g.dense(gated, p(&ids, "head.dense1.weight"), p(&ids, "head.dense1.bias"))?;
    h = g.activation(h, Activation::Gelu)?;
    h = g.layer_norm(h, p(&ids, "head.norm.gamma"), p(&ids, "head.norm.beta"), cfg.ln_eps)?;
    h = g.dropout(h, cfg.head_dropout, train_mode, dropout_seed)?;
    h = g.dense(h, p(&ids, "head.out.weight"), p(&ids, "head.out.bias"))?;
    let probs2d = g.activation(h, Activation::Sigmoid)?;
    let probs = g.reshape(probs2d, vec![n])?;

    Ok(ForwardPass {
        graph: g,
        param_ids: ids,
        features,
        probs,
    })
}

/// Eval-mode probabilities for a batch, discarding the graph.
pub fn predict<T: Real>(model: &Model<T>, batch: Tensor<T>) -> Result<Vec<T>, ModelError> {
    let pass = forward(model, batch, false, 0)?;
    Ok(pass.graph.value(pass.probs).data.clone())
}
