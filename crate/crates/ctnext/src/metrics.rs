//! Classification evaluation: confusion matrix, threshold metrics, ROC/AUC
//! (trapezoid and an independent pairwise route), and figure-ready CSV/JSON
//! report export. Positive class is label 1 throughout and the prediction
//! rule is `prob >= threshold`.

use crate::train::TrainHistory;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {probs} probabilities vs {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("both classes must be present")]
    OneClassOnly,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionMatrix {
    pub fn new(true_pos: usize, false_pos: usize, false_neg: usize, true_neg: usize) -> Self {
        Self {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Tallies predictions (`prob >= threshold`) against binary labels.
pub fn confusion(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionMatrix, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        let predicted = p >= threshold;
        match (predicted, y == 1) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
            (false, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

/// Per-metric degenerate-denominator flags; a flagged metric reports 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub accuracy: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub specificity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub degenerate: DegenerateFlags,
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    let mut flags = DegenerateFlags::default();
    let ratio = |num: usize, den: usize, flag: &mut bool| {
        if den == 0 {
            *flag = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(cm.true_pos + cm.true_neg, cm.total(), &mut flags.accuracy);
    let precision = ratio(cm.true_pos, cm.true_pos + cm.false_pos, &mut flags.precision);
    let recall = ratio(cm.true_pos, cm.true_pos + cm.false_neg, &mut flags.recall);
    let specificity = ratio(cm.true_neg, cm.true_neg + cm.false_pos, &mut flags.specificity);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.f1 = true;
        0.0
    };
    ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        specificity,
        degenerate: flags,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC sweep over unique scores descending, with `+inf`/`-inf` sentinel
/// endpoints at (0,0) and (1,1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc_curve(probs: &[f64], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        // Tied scores collapse into a single sweep point.
        let mut j = i;
        while j < order.len() && probs[order[j]] == score {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: score,
        });
        i = j;
    }
    points.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
    });
    // Collapse coordinate duplicates, keeping the later threshold so the
    // -inf sentinel remains the final row.
    let mut dedup: Vec<RocPoint> = Vec::with_capacity(points.len());
    for p in points {
        match dedup.last_mut() {
            Some(last) if last.fpr == p.fpr && last.tpr == p.tpr => *last = p,
            _ => dedup.push(p),
        }
    }
    Ok(RocCurve { points: dedup })
}

/// Trapezoidal area under the sweep.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for pair in curve.points.windows(2) {
        area += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    area
}

/// Mann-Whitney pairwise route: `(#{p_pos > p_neg} + 0.5 #ties) / (n_pos n_neg)`.
///
/// Agrees with the trapezoidal route in exact arithmetic; kept independent
/// as the oracle side of the pair.
pub fn auc_pairwise(probs: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let pos: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&p, _)| p)
        .collect();
    let neg: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 1)
        .map(|(&p, _)| p)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::OneClassOnly);
    }
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos.len() as f64 * neg.len() as f64))
}

/// Scalar evaluation summary backing `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub loss: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub confusion: ConfusionMatrix,
    pub degenerate: DegenerateFlags,
}

/// Mean binary cross-entropy of probabilities against labels, with the same
/// clamp the training loss applies.
pub fn bce_of_probs(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len().max(1);
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(1e-7, 1.0 - 1e-7);
        let term = if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
        total -= term;
    }
    total / n as f64
}

pub fn build_report(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport, MetricsError> {
    let cm = confusion(probs, labels, threshold)?;
    let m = classification_metrics(&cm);
    let curve_auc = match roc_curve(probs, labels) {
        Ok(curve) => auc(&curve),
        Err(MetricsError::OneClassOnly) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        loss: bce_of_probs(probs, labels),
        auc: curve_auc,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        specificity: m.specificity,
        f1: m.f1,
        threshold,
        n_pos: labels.iter().filter(|&&y| y == 1).count(),
        n_neg: labels.iter().filter(|&&y| y != 1).count(),
        confusion: cm,
        degenerate: m.degenerate,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), MetricsError> {
    std::fs::write(path, contents).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Emits `report.json`, `roc.csv`, `auc_evolution.csv`, and `prob_dist.csv`
/// into `out_dir`: the data behind the evaluation report, the ROC plot, the
/// AUC evolution plot, and the per-class probability distributions.
pub fn export_report(
    history: &TrainHistory,
    probs: &[f64],
    labels: &[u8],
    out_dir: &Path,
) -> Result<MetricReport, MetricsError> {
    std::fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let report = build_report(probs, labels, 0.5)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out_dir.join("report.json"), &json)?;

    let mut roc = String::from("fpr,tpr,threshold\n");
    if let Ok(curve) = roc_curve(probs, labels) {
        for p in &curve.points {
            writeln!(roc, "{},{},{}", p.fpr, p.tpr, p.threshold).unwrap();
        }
    }
    write_file(&out_dir.join("roc.csv"), &roc)?;

    let mut evolution = String::from("epoch,phase,train_auc,val_auc\n");
    for rec in &history.records {
        writeln!(
            evolution,
            "{},{},{},{}",
            rec.epoch, rec.phase, rec.train_auc, rec.val_auc
        )
        .unwrap();
    }
    write_file(&out_dir.join("auc_evolution.csv"), &evolution)?;

    let mut dist = String::from("label,probability\n");
    for (&p, &y) in probs.iter().zip(labels) {
        writeln!(dist, "{y},{p}").unwrap();
    }
    write_file(&out_dir.join("prob_dist.csv"), &dist)?;
    Ok(report)
}
