//! Classification metrics, ROC/AUC, regime ablation tables and their CSV renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loader::ImageSet;
use crate::modelzoo::{ModelHandle, Regime};
use crate::preprocess::NormalizationStats;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts with class 1 (cataract) as the positive class.
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::Input(format!("non-binary prediction/label pair ({p}, {y})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Positive-class F1; zero when there are no positives at all on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fp) as f64
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fn_) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    SingleEye,
    DualEye,
}

fn require_both_classes(labels: &[usize]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Metric(format!(
            "both classes are required, got {pos} positives out of {}",
            labels.len()
        )));
    }
    Ok(())
}

/// ROC staircase from descending thresholds, starting at `(0, 0, +inf)`, plus its trapezoid area.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("label {bad} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    require_both_classes(labels)?;
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: s,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

/// Softmax probability of class 1 per row of `[N, 2]` logits.
pub fn positive_scores(logits: &Tensor) -> Result<Vec<f64>> {
    check_logits(logits)?;
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| {
            let (a, b) = (r[0] as f64, r[1] as f64);
            1.0 / (1.0 + (a - b).exp())
        })
        .collect())
}

/// Argmax class per row; ties go to class 0.
pub fn predicted_classes(logits: &Tensor) -> Result<Vec<usize>> {
    check_logits(logits)?;
    Ok(logits.data().chunks(2).map(|r| usize::from(r[1] > r[0])).collect())
}

fn check_logits(logits: &Tensor) -> Result<()> {
    if logits.rank() != 2 || logits.dim(1) != 2 {
        return Err(Error::Shape(format!("expected [N, 2] logits, got {:?}", logits.shape())));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

pub fn report_from_logits(logits: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let predicted = predicted_classes(logits)?;
    let confusion = ConfusionCounts::from_predictions(&predicted, labels)?;
    let (roc, auc) = roc_curve(&positive_scores(logits)?, labels)?;
    Ok(MetricsReport {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
        roc,
        auc,
    })
}

/// Eval-mode logits `[N, 2]` for every example, in dataset order.
pub fn infer(model: &ModelHandle, set: &ImageSet, batch_size: usize, stats: &NormalizationStats) -> Result<Tensor> {
    if set.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    if set.is_dual() != model.is_dual() {
        return Err(Error::Input(format!(
            "{} dataset given to {} model",
            if set.is_dual() { "dual-eye" } else { "single-eye" },
            if model.is_dual() { "a dual-eye" } else { "a single-eye" }
        )));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut data = Vec::with_capacity(set.len() * 2);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk, None, stats)?;
        data.extend_from_slice(model.predict(&batch.input)?.data());
    }
    Ok(Tensor::new([set.len(), 2], data))
}

pub fn evaluate(model: &ModelHandle, set: &ImageSet, mode: EvalMode, stats: &NormalizationStats) -> Result<MetricsReport> {
    let want_dual = mode == EvalMode::DualEye;
    if want_dual != model.is_dual() || want_dual != set.is_dual() {
        return Err(Error::Input(format!("evaluation mode {mode:?} does not match the model or dataset")));
    }
    let logits = infer(model, set, 16, stats)?;
    report_from_logits(&logits, &set.labels())
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub regime: String,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub params_trainable: usize,
}

impl MetricsRow {
    pub fn new(model: &str, regime: &str, report: &MetricsReport, params_trainable: usize) -> Self {
        MetricsRow {
            model: model.to_string(),
            regime: regime.to_string(),
            accuracy: report.accuracy,
            f1: report.f1,
            auc: report.auc,
            tp: report.confusion.tp,
            fp: report.confusion.fp,
            tn: report.confusion.tn,
            fn_: report.confusion.fn_,
            params_trainable,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if rows.is_empty() {
        w.write_record(["model", "regime", "accuracy", "f1", "auc", "tp", "fp", "tn", "fn", "params_trainable"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `"0.9858 / 0.9857"`.
pub fn format_pair(accuracy: f64, f1: f64) -> String {
    format!("{accuracy:.4} / {f1:.4}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub ft: Option<(f64, f64)>,
    pub fr: Option<(f64, f64)>,
}

impl AblationRow {
    /// FT minus FR accuracy and F1, when both regimes are present.
    pub fn delta(&self) -> Option<(f64, f64)> {
        match (self.ft, self.fr) {
            (Some(a), Some(b)) => Some((a.0 - b.0, a.1 - b.1)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Groups `(model, regime)` results into one row per model, ordered by model name.
pub fn compare_regimes(results: &BTreeMap<(String, Regime), MetricsReport>) -> AblationTable {
    let mut rows: BTreeMap<&str, AblationRow> = BTreeMap::new();
    for ((model, regime), r) in results {
        let row = rows.entry(model.as_str()).or_insert_with(|| AblationRow {
            model: model.clone(),
            ft: None,
            fr: None,
        });
        let cell = Some((r.accuracy, r.f1));
        match regime {
            Regime::FullFinetune => row.ft = cell,
            Regime::FrozenBackbone => row.fr = cell,
        }
    }
    AblationTable {
        rows: rows.into_values().collect(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl AblationTable {
    /// Plain-text table; cells read `accuracy / f1`.
    pub fn render(&self) -> String {
        let cell = |c: Option<(f64, f64)>| c.map(|(a, f)| format_pair(a, f)).unwrap_or_else(|| "-".into());
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} | {:<15} | {:<15} | {:<17}", "model", "FT (acc / F1)", "FR (acc / F1)", "delta (acc / F1)");
        let _ = writeln!(s, "{}", "-".repeat(width + 58));
        for r in &self.rows {
            let delta = r
                .delta()
                .map(|(a, f)| format!("{a:+.4} / {f:+.4}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<width$} | {:<15} | {:<15} | {:<17}", r.model, cell(r.ft), cell(r.fr), delta);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["model", "ft_accuracy", "ft_f1", "fr_accuracy", "fr_f1", "delta_accuracy", "delta_f1"])?;
        for r in &self.rows {
            let d = r.delta();
            w.write_record([
                r.model.clone(),
                opt(r.ft.map(|c| c.0)),
                opt(r.ft.map(|c| c.1)),
                opt(r.fr.map(|c| c.0)),
                opt(r.fr.map(|c| c.1)),
                opt(d.map(|c| c.0)),
                opt(d.map(|c| c.1)),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_example() {
        let c = ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        assert_eq!(c.f1(), 0.5);
        assert_eq!(c.accuracy(), 1.0 / 3.0);
    }

    #[test]
    fn roc_examples() {
        let (_, auc) = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        let (pts, auc) = roc_curve(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(pts.len(), 2);
        assert_eq!(roc_curve(&[0.1, 0.2, 0.9], &[0, 0, 1]).unwrap().1, 1.0);
        assert!(matches!(roc_curve(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
    }

    #[test]
    fn pair_formatting() {
        assert_eq!(format_pair(0.98578, 0.98566), "0.9858 / 0.9857");
    }
}
