//! Two-phase training: Adam, the seeded epoch loop, plateau LR reduction,
//! early stopping, best-checkpoint tracking, and deterministic history
//! capture. Phase 1 trains the head on a frozen backbone; phase 2 unfreezes
//! the upper half of the backbone under a much smaller learning rate with a
//! fresh optimizer.

use crate::augment::stream_seed;
use crate::dataio::{save_checkpoint, DataError, SliceDataset};
use crate::metrics::{self, MetricsError};
use crate::model::{forward, set_phase_trainability, Model, ModelError};
use crate::tensor::{Real, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("gradient/parameter shape mismatch for {0}")]
    GradShape(String),
    #[error("training set is empty")]
    EmptyData,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        Self {
            phase: 1,
            epochs: 12,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }

    pub fn phase2() -> Self {
        Self {
            phase: 2,
            epochs: 8,
            learning_rate: 1e-6,
            batch_size: 32,
        }
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CallbackConfig {
    /// Early stop after this many epochs without val-loss improvement.
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
}

impl Default for CallbackConfig {
    fn default() -> Self {
        Self {
            early_stop_patience: 5,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_lr: 1e-9,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub train_auc: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_val_loss_epoch: Option<usize>,
    pub best_val_auc_epoch: Option<usize>,
}

impl TrainHistory {
    /// `history.csv` contents: epoch, phase, losses, AUCs, and LR per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,train_loss,train_auc,val_loss,val_auc,lr\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.phase, r.train_loss, r.train_auc, r.val_loss, r.val_auc, r.lr
            )
            .unwrap();
        }
        out
    }
}

/// Adam moments keyed by parameter name. Hyperparameters are the standard
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over the trainable parameters present in
/// `grads`; frozen parameters are untouched bitwise.
pub fn adam_step<T: Real>(
    model: &mut Model<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64_c(state.beta1);
    let beta2 = T::from_f64_c(state.beta2);
    let one = T::one();
    let bias1 = one - beta1.powi(t);
    let bias2 = one - beta2.powi(t);
    let lr_t = T::from_f64_c(lr);
    let eps = T::from_f64_c(state.eps);
    for (name, grad) in grads {
        if !model.trainable.get(name).copied().unwrap_or(false) {
            continue;
        }
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| TrainError::GradShape(name.clone()))?;
        if grad.len() != param.data.len() {
            return Err(TrainError::GradShape(name.clone()));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((p, &g), (mi, vi)) in param
            .data
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = beta1 * *mi + (one - beta1) * g;
            *vi = beta2 * *vi + (one - beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn batch_tensor<T: Real>(data: &SliceDataset, indices: &[usize]) -> (Tensor<T>, Vec<u8>) {
    let (h, w) = {
        let img = &data.records[indices[0]].image;
        (img.height, img.width)
    };
    let mut buf = Vec::with_capacity(indices.len() * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = &data.records[i];
        buf.extend(rec.image.pixels.iter().map(|&v| T::from_f64_c(v as f64)));
        labels.push(rec.label);
    }
    (Tensor::new(vec![indices.len(), h, w, 1], buf), labels)
}

fn auc_or_neutral(probs: &[f64], labels: &[u8]) -> f64 {
    match metrics::roc_curve(probs, labels) {
        Ok(curve) => metrics::auc(&curve),
        // Single-class data carries no ranking signal.
        Err(_) => 0.5,
    }
}

pub struct EpochStats {
    pub train_loss: f64,
    pub train_auc: f64,
}

/// One seeded training epoch: shuffle, fixed-size batches (last partial
/// kept), forward in train mode, BCE with equal class weights, backward,
/// Adam step per batch.
pub fn run_epoch<T: Real>(
    model: &mut Model<T>,
    data: &SliceDataset,
    cfg: &PhaseConfig,
    opt: &mut OptimizerState<T>,
    lr: f64,
    seed: u64,
    epoch_index: usize,
) -> Result<EpochStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        &[b"shuffle".as_slice(), &epoch_index.to_le_bytes()].concat(),
    ));
    indices.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut all_probs = Vec::with_capacity(data.len());
    let mut all_labels = Vec::with_capacity(data.len());
    for (batch_idx, batch) in indices.chunks(cfg.batch_size.max(1)).enumerate() {
        let (x, labels) = batch_tensor::<T>(data, batch);
        let dropout_seed = stream_seed(
            seed,
            &[
                b"dropout".as_slice(),
                &epoch_index.to_le_bytes(),
                &batch_idx.to_le_bytes(),
            ]
            .concat(),
        );
        let mut pass = forward(model, x, true, dropout_seed)?;
        let y = pass.graph.leaf(Tensor::from_f64(
            vec![labels.len()],
            &labels.iter().map(|&l| l as f64).collect::<Vec<f64>>(),
        ));
        let loss = pass.graph.bce_loss(pass.probs, y, (1.0, 1.0))?;
        let loss_val = pass.graph.value(loss).item().to_f64_c();
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch_index,
                batch: batch_idx,
            });
        }
        pass.graph.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &pass.param_ids {
            if model.trainable[name] {
                if let Some(g) = pass.graph.grad(id) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
        }
        for (&p, &l) in pass
            .graph
            .value(pass.probs)
            .data
            .iter()
            .zip(&labels)
        {
            all_probs.push(p.to_f64_c());
            all_labels.push(l);
        }
        loss_sum += loss_val * batch.len() as f64;
        adam_step(model, &grads, opt, lr)?;
    }
    Ok(EpochStats {
        train_loss: loss_sum / data.len() as f64,
        train_auc: auc_or_neutral(&all_probs, &all_labels),
    })
}

/// Eval-mode pass over a dataset. Returns (loss, auc, probabilities).
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &SliceDataset,
    batch_size: usize,
) -> Result<(f64, f64, Vec<f64>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut probs = Vec::with_capacity(data.len());
    for batch in indices.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensor::<T>(data, batch);
        let pass = forward(model, x, false, 0)?;
        probs.extend(pass.graph.value(pass.probs).data.iter().map(|p| p.to_f64_c()));
    }
    let labels: Vec<u8> = data.records.iter().map(|r| r.label).collect();
    let loss = metrics::bce_of_probs(&probs, &labels);
    Ok((loss, auc_or_neutral(&probs, &labels), probs))
}

/// Trailing epochs without a val-loss improvement of at least `min_delta`.
/// The counter restarts on improvement and, optionally, whenever the
/// recorded learning rate changes (i.e. after a plateau reduction).
fn no_improve_streak(records: &[EpochRecord], min_delta: f64, reset_on_lr_change: bool) -> usize {
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    let mut prev_lr = records.first().map(|r| r.lr).unwrap_or(0.0);
    for r in records {
        if reset_on_lr_change && r.lr != prev_lr {
            streak = 0;
            prev_lr = r.lr;
        }
        if r.val_loss < best - min_delta {
            best = r.val_loss;
            streak = 0;
        } else {
            streak += 1;
        }
    }
    streak
}

/// Halving-style LR schedule: when val loss sits flat for
/// `plateau_patience` epochs, the rate drops by `plateau_factor` (floored
/// at `min_lr`) and the patience counter restarts.
pub fn reduce_on_plateau(records: &[EpochRecord], cfg: &CallbackConfig, current_lr: f64) -> f64 {
    if current_lr <= cfg.min_lr {
        return current_lr;
    }
    if no_improve_streak(records, cfg.min_delta, true) >= cfg.plateau_patience {
        (current_lr * cfg.plateau_factor).max(cfg.min_lr)
    } else {
        current_lr
    }
}

/// True once val loss has gone `early_stop_patience` epochs without
/// improving by `min_delta`.
pub fn early_stop(records: &[EpochRecord], cfg: &CallbackConfig) -> bool {
    no_improve_streak(records, cfg.min_delta, false) >= cfg.early_stop_patience
}

/// Runs the configured phases in order: each phase re-applies its
/// trainability mask and starts a fresh optimizer at its own learning rate.
/// After every epoch the model is evaluated on `val_set`, best-val-loss and
/// best-val-AUC checkpoints are refreshed, and (when callbacks are enabled)
/// plateau LR reduction and early stopping run on the phase's history; an
/// early stop restores the best-val-loss weights seen so far.
///
/// Writes `history.csv`, `best_loss.ckpt`, `best_auc.ckpt`, `final.ckpt`
/// into `out_dir`.
pub fn train_two_phase<T: Real>(
    model: &mut Model<T>,
    train_set: &SliceDataset,
    val_set: &SliceDataset,
    phases: &[PhaseConfig],
    callbacks: Option<&CallbackConfig>,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainHistory, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut history = TrainHistory::default();
    let mut best_val_loss = f64::INFINITY;
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best_loss_params: Option<BTreeMap<String, Tensor<T>>> = None;

    for cfg in phases {
        set_phase_trainability(model, cfg.phase);
        let mut opt = OptimizerState::<T>::new();
        let mut lr = cfg.learning_rate;
        let phase_start = history.records.len();
        for _ in 0..cfg.epochs {
            let epoch = history.records.len();
            let started = Instant::now();
            let stats = run_epoch(model, train_set, cfg, &mut opt, lr, seed, epoch)?;
            let (val_loss, val_auc, _) = evaluate(model, val_set, cfg.batch_size)?;
            history.records.push(EpochRecord {
                epoch,
                phase: cfg.phase,
                train_loss: stats.train_loss,
                train_auc: stats.train_auc,
                val_loss,
                val_auc,
                lr,
                wall_secs: started.elapsed().as_secs_f64(),
            });
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                history.best_val_loss_epoch = Some(epoch);
                best_loss_params = Some(model.params.clone());
                save_checkpoint(
                    &model.to_param_entries(),
                    &model.checkpoint_meta(cfg.phase, epoch as u32, val_loss, val_auc),
                    &out_dir.join("best_loss.ckpt"),
                )?;
            }
            if val_auc > best_val_auc {
                best_val_auc = val_auc;
                history.best_val_auc_epoch = Some(epoch);
                save_checkpoint(
                    &model.to_param_entries(),
                    &model.checkpoint_meta(cfg.phase, epoch as u32, val_loss, val_auc),
                    &out_dir.join("best_auc.ckpt"),
                )?;
            }
            write_history(&history, out_dir)?;
            if let Some(cb) = callbacks {
                let phase_records = &history.records[phase_start..];
                lr = reduce_on_plateau(phase_records, cb, lr);
                if early_stop(phase_records, cb) {
                    if let Some(best) = &best_loss_params {
                        model.params = best.clone();
                    }
                    break;
                }
            }
        }
    }
    let last = history.records.last();
    save_checkpoint(
        &model.to_param_entries(),
        &model.checkpoint_meta(
            last.map(|r| r.phase).unwrap_or(1),
            last.map(|r| r.epoch as u32).unwrap_or(0),
            last.map(|r| r.val_loss).unwrap_or(f64::NAN),
            last.map(|r| r.val_auc).unwrap_or(f64::NAN),
        ),
        &out_dir.join("final.ckpt"),
    )?;
    write_history(&history, out_dir)?;
    Ok(history)
}

fn write_history(history: &TrainHistory, out_dir: &Path) -> Result<(), TrainError> {
    let path = out_dir.join("history.csv");
    std::fs::write(&path, history.to_csv()).map_err(|e| {
        TrainError::Data(DataError::Io {
            path,
            source: e,
        })
    })
}
