//! Evaluation metrics for classifier heads: confusion matrices,
//! per-class precision/recall/F-score, one-vs-rest ROC curves with AUC,
//! average precision, and CSV serialization of the full report.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, XaeError};

/// One point of an ROC curve: predict positive when score ≥ threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One-vs-rest metrics for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    /// True-instance count in the evaluated set.
    pub support: usize,
    pub precision: f64,
    /// Equals the confusion matrix's row accuracy for this class.
    pub recall: f64,
    pub f_score: f64,
    /// Step-wise precision-recall summation; absent without scores.
    pub average_precision: Option<f64>,
    /// Trapezoid area under the ROC curve; absent without scores or
    /// when the class has no positives or no negatives.
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
}

/// Full evaluation of one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Array2<usize>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    /// Per-class F weighted by support.
    pub weighted_f: f64,
    /// Unweighted mean of the per-class one-vs-rest AUCs.
    pub macro_auc: Option<f64>,
    /// Headline score: the positive class's F₁ when a positive class
    /// is designated (detection), the weighted F otherwise.
    pub primary_f: f64,
    pub notes: Vec<String>,
}

fn ratio_or_zero(num: usize, den: usize, what: &str, class: &str, notes: &mut Vec<String>) -> f64 {
    if den == 0 {
        notes.push(format!("class {class:?}: {what} undefined (0/0), reported as 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics derivable from a confusion matrix alone (no score-based
/// curves). Rows are true classes.
pub fn from_confusion(
    confusion: Array2<usize>,
    class_names: &[String],
    positive: Option<usize>,
) -> Result<EvalReport> {
    let c = class_names.len();
    if c < 2 {
        return Err(XaeError::InvalidData(format!(
            "evaluation needs at least 2 classes, got {c}"
        )));
    }
    if confusion.dim() != (c, c) {
        return Err(XaeError::DimMismatch {
            expected: c * c,
            got: confusion.len(),
        });
    }
    if let Some(p) = positive {
        if p >= c {
            return Err(XaeError::InvalidConfig(format!(
                "positive class index {p} out of range for {c} classes"
            )));
        }
    }
    let total: usize = confusion.iter().sum();
    if total == 0 {
        return Err(XaeError::InvalidData("empty confusion matrix".into()));
    }
    let mut notes = vec!["scores unavailable: ROC, AUC, and average precision omitted".into()];
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[[k, k]];
        let row: usize = confusion.row(k).sum();
        let col: usize = confusion.column(k).sum();
        let name = &class_names[k];
        if row == 0 && col == 0 {
            notes.push(format!(
                "class {name:?} absent from both truth and prediction"
            ));
        }
        let precision = ratio_or_zero(tp, col, "precision", name, &mut notes);
        let recall = ratio_or_zero(tp, row, "recall", name, &mut notes);
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            name: name.clone(),
            support: row,
            precision,
            recall,
            f_score,
            average_precision: None,
            auc: None,
            roc: Vec::new(),
        });
    }
    let correct: usize = (0..c).map(|k| confusion[[k, k]]).sum();
    let accuracy = correct as f64 / total as f64;
    let weighted_f = per_class
        .iter()
        .map(|m| m.support as f64 * m.f_score)
        .sum::<f64>()
        / total as f64;
    let primary_f = match positive {
        Some(p) => {
            notes.push(format!(
                "primary F is the F₁ of positive class {:?}",
                class_names[p]
            ));
            per_class[p].f_score
        }
        None => weighted_f,
    };
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        confusion,
        per_class,
        accuracy,
        weighted_f,
        macro_auc: None,
        primary_f,
        notes,
    })
}

/// Distinct-threshold sweep over one class's scores: for each distinct
/// score s (descending), the point after classifying score ≥ s as
/// positive. Returns (roc points incl. the (∞,0,0) anchor, auc, ap).
fn sweep_class(truth_pos: &[bool], scores: &[f64]) -> (Vec<RocPoint>, Option<f64>, Option<f64>) {
    let pos = truth_pos.iter().filter(|&&t| t).count();
    let neg = truth_pos.len() - pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut auc = 0.0;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        // Consume the whole tie group before emitting a point.
        while i < idx.len() && scores[idx[i]] == s {
            if truth_pos[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if pos > 0 {
            let recall = tp as f64 / pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        if pos > 0 && neg > 0 {
            let point = RocPoint {
                threshold: s,
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            };
            let last = *roc.last().expect("anchored");
            auc += (point.fpr - last.fpr) * (point.tpr + last.tpr) / 2.0;
            roc.push(point);
        }
    }
    if pos == 0 || neg == 0 {
        (Vec::new(), None, (pos > 0).then_some(ap))
    } else {
        (roc, Some(auc), Some(ap))
    }
}

/// Evaluate per-class scores (rows = samples, columns = classes).
/// Predictions are the score argmax; ties pick the lowest index.
pub fn evaluate_scores(
    truth: &[usize],
    scores: ArrayView2<f64>,
    class_names: &[String],
    positive: Option<usize>,
) -> Result<EvalReport> {
    let c = class_names.len();
    if c < 2 {
        return Err(XaeError::InvalidData(format!(
            "evaluation needs at least 2 classes, got {c}"
        )));
    }
    if truth.is_empty() {
        return Err(XaeError::InvalidData("no samples to evaluate".into()));
    }
    if scores.nrows() != truth.len() || scores.ncols() != c {
        return Err(XaeError::DimMismatch {
            expected: truth.len() * c,
            got: scores.len(),
        });
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= c) {
        return Err(XaeError::InvalidData(format!(
            "true class index {t} out of range for {c} classes"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(XaeError::Numeric("non-finite prediction score".into()));
    }

    let mut confusion = Array2::zeros((c, c));
    for (k, &t) in truth.iter().enumerate() {
        let row = scores.row(k);
        let mut arg = 0;
        for (j, &s) in row.iter().enumerate() {
            if s > row[arg] {
                arg = j;
            }
        }
        confusion[[t, arg]] += 1;
    }

    let mut report = from_confusion(confusion, class_names, positive)?;
    report.notes.remove(0); // scores are available after all

    let mut aucs = Vec::new();
    for k in 0..c {
        let truth_pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        let class_scores: Vec<f64> = scores.column(k).to_vec();
        let (roc, auc, ap) = sweep_class(&truth_pos, &class_scores);
        if auc.is_none() {
            report.notes.push(format!(
                "class {:?}: ROC/AUC undefined (needs both positives and negatives)",
                class_names[k]
            ));
        }
        if let Some(a) = auc {
            aucs.push(a);
        }
        let m = &mut report.per_class[k];
        m.roc = roc;
        m.auc = auc;
        m.average_precision = ap;
    }
    if aucs.len() == c {
        report.macro_auc = Some(aucs.iter().sum::<f64>() / c as f64);
    } else {
        report
            .notes
            .push("macro AUC omitted: some class had no defined AUC".into());
    }
    Ok(report)
}

impl EvalReport {
    /// Per-class row accuracies (diagonal over row sum), i.e. recalls.
    pub fn row_accuracies(&self) -> Vec<f64> {
        self.per_class.iter().map(|m| m.recall).collect()
    }

    pub fn sample_count(&self) -> usize {
        self.confusion.iter().sum()
    }

    /// Long-format metrics table: metric,class,value.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "metric,class,value").map_err(io_err)?;
        writeln!(w, "accuracy,,{}", self.accuracy).map_err(io_err)?;
        writeln!(w, "weighted_f,,{}", self.weighted_f).map_err(io_err)?;
        writeln!(w, "primary_f,,{}", self.primary_f).map_err(io_err)?;
        if let Some(a) = self.macro_auc {
            writeln!(w, "macro_auc,,{a}").map_err(io_err)?;
        }
        for m in &self.per_class {
            writeln!(w, "support,{},{}", m.name, m.support).map_err(io_err)?;
            writeln!(w, "precision,{},{}", m.name, m.precision).map_err(io_err)?;
            writeln!(w, "recall,{},{}", m.name, m.recall).map_err(io_err)?;
            writeln!(w, "f_score,{},{}", m.name, m.f_score).map_err(io_err)?;
            if let Some(ap) = m.average_precision {
                writeln!(w, "average_precision,{},{ap}", m.name).map_err(io_err)?;
            }
            if let Some(a) = m.auc {
                writeln!(w, "auc,{},{a}", m.name).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    /// Per-class ROC points: class,threshold,fpr,tpr.
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "class,threshold,fpr,tpr").map_err(io_err)?;
        for m in &self.per_class {
            for p in &m.roc {
                writeln!(w, "{},{},{},{}", m.name, p.threshold, p.fpr, p.tpr).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    /// Confusion counts, rows = true classes: true,<predicted names…>.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "true,{}", self.class_names.join(",")).map_err(io_err)?;
        for (k, name) in self.class_names.iter().enumerate() {
            let row: Vec<String> = self.confusion.row(k).iter().map(|c| c.to_string()).collect();
            writeln!(w, "{name},{}", row.join(",")).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}
