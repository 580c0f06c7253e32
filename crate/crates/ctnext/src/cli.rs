//! Config-driven pipeline commands: synth, preprocess, split, augment,
//! train, evaluate. One declarative TOML file holds every stage's settings;
//! flags only override the seed or evaluation inputs. Per-stage RNG streams
//! derive from the single global seed, so a config plus seed pins every
//! output byte.

use crate::augment::{balance_augment, stream_seed, stratified_split, AugmentPolicy, SplitSpec};
use crate::dataio::{read_nifti, read_slice_dataset, write_slice_dataset, SliceDataset, SliceRecord};
use crate::imaging::{preprocess_volume, PreprocessConfig, RoiFallback};
use crate::metrics::export_report;
use crate::model::{build_model, Model, ModelConfig};
use crate::synth::{generate_phantom, write_phantom_corpus, PhantomSpec};
use crate::train::{train_two_phase, CallbackConfig, PhaseConfig, TrainError, TrainHistory};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Exit codes: 0 success, 2 input/config error, 3 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(crate::tensor::TensorError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub raw_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub split_train_dir: PathBuf,
    pub split_val_dir: PathBuf,
    pub train_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            raw_dir: "raw".into(),
            dataset_dir: "dataset".into(),
            split_train_dir: "split/train".into(),
            split_val_dir: "split/val".into(),
            train_dir: "train".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_pos: usize,
    pub n_neg: usize,
    pub phantom: PhantomSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_pos: 4,
            n_neg: 4,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub callbacks_enabled: bool,
    pub callbacks: CallbackConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            phase1_epochs: 12,
            phase1_lr: 1e-3,
            phase2_epochs: 8,
            phase2_lr: 1e-6,
            batch_size: 32,
            callbacks_enabled: true,
            callbacks: CallbackConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn phases(&self) -> [PhaseConfig; 2] {
        [
            PhaseConfig {
                phase: 1,
                epochs: self.phase1_epochs,
                learning_rate: self.phase1_lr,
                batch_size: self.batch_size,
            },
            PhaseConfig {
                phase: 2,
                epochs: self.phase2_epochs,
                learning_rate: self.phase2_lr,
                batch_size: self.batch_size,
            },
        ]
    }
}

/// The one declarative run configuration. Every field has a default;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| input_err(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loads a config file; relative paths resolve against its directory,
    /// and `seed_override` replaces the global seed.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| input_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for dir in [
            &mut cfg.paths.raw_dir,
            &mut cfg.paths.dataset_dir,
            &mut cfg.paths.split_train_dir,
            &mut cfg.paths.split_val_dir,
            &mut cfg.paths.train_dir,
            &mut cfg.paths.run_dir,
        ] {
            if dir.is_relative() {
                *dir = base.join(&dir);
            }
        }
        Ok(cfg)
    }

    /// Per-stage RNG streams derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stream_seed(self.seed, stage.as_bytes())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.stage_seed("synth"),
            ..self.synth.phantom.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.stage_seed("split"),
            ..self.split
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            seed: self.stage_seed("augment"),
            ..self.augment.clone()
        }
    }
}

/// `synth`: writes the phantom corpus (`.nii` volumes plus `labels.csv`).
pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let entries = write_phantom_corpus(
        &cfg.phantom_spec(),
        cfg.synth.n_pos,
        cfg.synth.n_neg,
        &cfg.paths.raw_dir,
    )
    .map_err(input_err)?;
    println!(
        "synth: wrote {} volumes to {}",
        entries.len(),
        cfg.paths.raw_dir.display()
    );
    Ok(())
}

fn read_labels_csv(path: &Path) -> Result<Vec<(String, u8)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_err(format!("cannot read labels file {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == "volume_id,label") {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| input_err(format!("labels line {} malformed: {line}", lineno + 1)))?;
        let label: u8 = label
            .trim()
            .parse()
            .map_err(|_| input_err(format!("labels line {}: bad label {label}", lineno + 1)))?;
        if label > 1 {
            return Err(input_err(format!("labels line {}: label must be 0 or 1", lineno + 1)));
        }
        entries.push((id.trim().to_string(), label));
    }
    Ok(entries)
}

/// `preprocess`: runs the slice pipeline over every labeled volume in
/// `raw_dir` and writes the `.slc` dataset plus a per-slice provenance log.
/// Partial outputs are removed when any volume fails.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let raw = &cfg.paths.raw_dir;
    if !raw.is_dir() {
        return Err(input_err(format!("input directory {} not found", raw.display())));
    }
    let labels = read_labels_csv(&raw.join("labels.csv"))?;
    if labels.is_empty() {
        return Err(input_err(format!(
            "no labeled volumes listed in {}",
            raw.join("labels.csv").display()
        )));
    }
    let result = (|| -> Result<(usize, String), CliError> {
        let mut records = Vec::new();
        let mut provenance = String::new();
        for (volume_id, label) in &labels {
            let nii = raw.join(format!("{volume_id}.nii"));
            let volume = read_nifti(&nii).map_err(input_err)?;
            let slices = preprocess_volume(&volume, &cfg.preprocess).map_err(input_err)?;
            for slice in slices {
                let slice_id = format!("{volume_id}_s{:03}", slice.slice_index);
                let fallback = match slice.roi.fallback_used {
                    RoiFallback::None => "none",
                    RoiFallback::SingleComponent => "single_component",
                    RoiFallback::WholeImage => "whole_image",
                };
                writeln!(
                    provenance,
                    "{slice_id}\t{}\tslice={}\tfallback={fallback}",
                    nii.display(),
                    slice.slice_index
                )
                .unwrap();
                records.push(SliceRecord {
                    id: slice_id,
                    label: *label,
                    image: slice.roi.image,
                });
            }
        }
        let dataset = SliceDataset::new(records);
        write_slice_dataset(&dataset, &cfg.paths.dataset_dir).map_err(input_err)?;
        Ok((dataset.len(), provenance))
    })();
    match result {
        Ok((count, provenance)) => {
            let log = cfg.paths.dataset_dir.join("provenance.log");
            std::fs::write(&log, provenance)
                .map_err(|e| input_err(format!("cannot write {}: {e}", log.display())))?;
            println!(
                "preprocess: {} slices -> {}",
                count,
                cfg.paths.dataset_dir.display()
            );
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&cfg.paths.dataset_dir);
            Err(e)
        }
    }
}

/// `split`: stratified train/validation partition of the preprocessed
/// dataset.
pub fn cmd_split(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = read_slice_dataset(&cfg.paths.dataset_dir).map_err(input_err)?;
    let (train, val) = stratified_split(&dataset, &cfg.split_spec()).map_err(input_err)?;
    write_slice_dataset(&train, &cfg.paths.split_train_dir).map_err(input_err)?;
    write_slice_dataset(&val, &cfg.paths.split_val_dir).map_err(input_err)?;
    println!(
        "split: {} train / {} val",
        train.len(),
        val.len()
    );
    Ok(())
}

/// `augment`: balances the train split up to `target_per_class`; the
/// validation side is never touched.
pub fn cmd_augment(cfg: &RunConfig) -> Result<(), CliError> {
    let train = read_slice_dataset(&cfg.paths.split_train_dir).map_err(input_err)?;
    let balanced = balance_augment(&train, &cfg.augment_policy()).map_err(input_err)?;
    write_slice_dataset(&balanced, &cfg.paths.train_dir).map_err(input_err)?;
    let counts = balanced.counts_per_class();
    println!(
        "augment: train balanced to {}/{} -> {}",
        counts[&0],
        counts[&1],
        cfg.paths.train_dir.display()
    );
    Ok(())
}

/// `train`: two-phase training over the augmented train set, writing
/// history and checkpoints into the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainHistory, CliError> {
    let train_set = read_slice_dataset(&cfg.paths.train_dir).map_err(input_err)?;
    let val_set = read_slice_dataset(&cfg.paths.split_val_dir).map_err(input_err)?;
    let mut model: Model<f32> =
        build_model(&cfg.model, cfg.stage_seed("model-init")).map_err(input_err)?;
    let callbacks = cfg.train.callbacks_enabled.then_some(&cfg.train.callbacks);
    let history = train_two_phase(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train.phases(),
        callbacks,
        cfg.stage_seed("train"),
        &cfg.paths.run_dir,
    )?;
    if let Some(last) = history.records.last() {
        println!(
            "train: {} epochs, final val_loss={} val_auc={} -> {}",
            history.records.len(),
            last.val_loss,
            last.val_auc,
            cfg.paths.run_dir.display()
        );
    }
    Ok(history)
}

/// `evaluate`: eval-mode pass of a checkpoint over a dataset (defaults to
/// the validation split), writing the four report files.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let data_dir = data_dir.unwrap_or(&cfg.paths.split_val_dir);
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run_dir.join("eval"));
    let dataset = read_slice_dataset(data_dir).map_err(input_err)?;
    let mut model: Model<f32> =
        build_model(&cfg.model, cfg.stage_seed("model-init")).map_err(input_err)?;
    let ckpt = crate::dataio::load_checkpoint(checkpoint).map_err(input_err)?;
    model.apply_checkpoint(&ckpt).map_err(input_err)?;
    let (_, _, probs) = crate::train::evaluate(&model, &dataset, cfg.train.batch_size)?;
    let labels: Vec<u8> = dataset.records.iter().map(|r| r.label).collect();
    // History for the evolution file comes from the training run when
    // available; evaluation alone yields an empty evolution table.
    let history = read_history_csv(&cfg.paths.run_dir.join("history.csv")).unwrap_or_default();
    let report = export_report(&history, &probs, &labels, &out_dir).map_err(input_err)?;
    println!(
        "evaluate: loss={} auc={} accuracy={} -> {}",
        report.loss,
        report.auc,
        report.accuracy,
        out_dir.display()
    );
    Ok(())
}

/// Reads back a `history.csv` written by training.
pub fn read_history_csv(path: &Path) -> Option<TrainHistory> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut history = TrainHistory::default();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return None;
        }
        history.records.push(crate::train::EpochRecord {
            epoch: fields[0].parse().ok()?,
            phase: fields[1].parse().ok()?,
            train_loss: fields[2].parse().ok()?,
            train_auc: fields[3].parse().ok()?,
            val_loss: fields[4].parse().ok()?,
            val_auc: fields[5].parse().ok()?,
            lr: fields[6].parse().ok()?,
            wall_secs: 0.0,
        });
    }
    Some(history)
}

/// Library entry matching the phantom generator's per-volume seeding; used
/// by tests that need raw phantoms without a corpus directory.
pub fn phantom_for_test(cfg: &RunConfig, volume_id: &str, positive: bool) -> crate::dataio::Volume {
    let spec = PhantomSpec {
        seed: stream_seed(cfg.phantom_spec().seed, volume_id.as_bytes()),
        ..cfg.phantom_spec()
    };
    generate_phantom(&spec, positive).0
}
