//! Threshold metrics for the poor-outcome class, mode aggregation, and
//! metric table rows.
//!
//! A prediction is positive when `score >= threshold`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("score set is empty")]
    Empty,
    #[error("metric undefined: score set has {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score at entry {0}")]
    NonFinite(usize),
    #[error("no rows to average")]
    NoRows,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    /// p(poor).
    pub score: f64,
    /// 1 = poor.
    pub truth: u8,
    pub patient_id: String,
    pub group_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    /// Builds a set from bare `(score, truth)` pairs.
    pub fn from_pairs(pairs: &[(f64, u8)]) -> Self {
        Self {
            entries: pairs
                .iter()
                .enumerate()
                .map(|(i, &(score, truth))| ScoreEntry {
                    score,
                    truth,
                    patient_id: format!("e{i}"),
                    group_id: String::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.entries.iter().filter(|e| e.truth == 1).count();
        (pos, self.entries.len() - pos)
    }

    fn check(&self) -> Result<(usize, usize)> {
        if self.entries.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(i) = self.entries.iter().position(|e| !e.score.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        let (positives, negatives) = self.class_counts();
        if positives == 0 || negatives == 0 {
            return Err(MetricError::SingleClass { positives, negatives });
        }
        Ok((positives, negatives))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// One point per distinct threshold (every distinct score plus +∞), in
/// decreasing threshold order, which is also nondecreasing fpr and tpr.
pub fn roc_points(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (pos, neg) = s.check()?;
    let mut order: Vec<(f64, u8)> = s.entries.iter().map(|e| (e.score, e.truth)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        while i < order.len() && order[i].0 == t {
            if order[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
            tp,
            fp,
        });
    }
    Ok(points)
}

/// Largest TPR over thresholds whose FPR is at most `fpr_cap`.
pub fn score_metric(s: &ScoreSet, fpr_cap: f64) -> Result<f64> {
    Ok(roc_points(s)?
        .iter()
        .filter(|p| p.fpr <= fpr_cap)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

pub const DEFAULT_FPR_CAP: f64 = 0.05;
pub const F1_THRESHOLD: f64 = 0.5;

/// F1 of the poor class from hard predictions.
pub fn f1_from_labels(pred: &[u8], truth: &[u8]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of the poor class at threshold 0.5.
pub fn f1(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let pred: Vec<u8> = s.entries.iter().map(|e| u8::from(e.score >= F1_THRESHOLD)).collect();
    let truth: Vec<u8> = s.entries.iter().map(|e| e.truth).collect();
    Ok(f1_from_labels(&pred, &truth))
}

/// Trapezoidal area under the ROC curve.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    let pts = roc_points(s)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// Step-wise area under the precision-recall curve: precision at each
/// threshold times the recall gained there.
pub fn auprc(s: &ScoreSet) -> Result<f64> {
    let pts = roc_points(s)?;
    Ok(pts
        .windows(2)
        .map(|w| {
            let precision = w[1].tp as f64 / (w[1].tp + w[1].fp) as f64;
            (w[1].tpr - w[0].tpr) * precision
        })
        .sum())
}

/// Per-patient majority label, sorted by patient id. Ties go to good (0).
pub fn mode_aggregate(per_segment: &[(String, u8)]) -> Vec<(String, u8)> {
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (pid, label) in per_segment {
        let v = votes.entry(pid.as_str()).or_default();
        if *label == 1 {
            v.1 += 1;
        } else {
            v.0 += 1;
        }
    }
    votes
        .into_iter()
        .map(|(pid, (good, poor))| (pid.to_string(), u8::from(poor > good)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub sm: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub n: usize,
}

impl MetricRow {
    /// Metrics of a score set; F1 uses the given hard labels when present.
    pub fn from_scores(label: &str, s: &ScoreSet, hard: Option<&[u8]>, fpr_cap: f64) -> Result<Self> {
        let f1 = match hard {
            Some(pred) => {
                s.check()?;
                let truth: Vec<u8> = s.entries.iter().map(|e| e.truth).collect();
                f1_from_labels(pred, &truth)
            }
            None => f1(s)?,
        };
        Ok(Self {
            label: label.to_string(),
            sm: score_metric(s, fpr_cap)?,
            f1,
            auroc: auroc(s)?,
            auprc: auprc(s)?,
            n: s.len(),
        })
    }
}

/// Arithmetic mean of each metric column.
pub fn average_row(rows: &[MetricRow], label: &str) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(MetricError::NoRows);
    }
    let k = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    Ok(MetricRow {
        label: label.to_string(),
        sm: mean(|r| r.sm),
        f1: mean(|r| r.f1),
        auroc: mean(|r| r.auroc),
        auprc: mean(|r| r.auprc),
        n: rows.iter().map(|r| r.n).sum(),
    })
}

/// Aligned text table.
pub fn render_table(title: &str, first_col: &str, rows: &[MetricRow]) -> String {
    let w = rows
        .iter()
        .map(|r| r.label.len())
        .chain([first_col.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{first_col:<w$} | {:>6} | {:>6} | {:>6} | {:>6} | {:>5}",
        "SM", "F1", "AUROC", "AUPRC", "n"
    );
    let _ = writeln!(out, "{}", "-".repeat(w + 47));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<w$} | {:>6.4} | {:>6.4} | {:>6.4} | {:>6.4} | {:>5}",
            r.label, r.sm, r.f1, r.auroc, r.auprc, r.n
        );
    }
    out
}
