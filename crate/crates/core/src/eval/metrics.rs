//! Threshold-free and threshold-swept classification metrics.

use serde::Serialize;

use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dimension("labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the rank statistic; tied scores count half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve as the step-wise sum
/// `sum_k (R_k - R_{k-1}) P_k` over descending distinct thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    let curve = MetricCurve::from_scores(scores, labels)?;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for pt in curve.points.iter().rev() {
        let recall = pt.tp as f64 / pos as f64;
        area += (recall - prev_recall) * pt.precision();
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricPoint {
    pub fn sensitivity(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// NaN when nothing fires.
    pub fn precision(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp) as f64
    }

    pub fn fpr(&self) -> f64 {
        let d = self.fp + self.tn;
        if d == 0 {
            0.0
        } else {
            self.fp as f64 / d as f64
        }
    }

    /// `fp / tp`; infinite without true alarms.
    pub fn false_alarms_per_true_alarm(&self) -> f64 {
        if self.tp == 0 {
            f64::INFINITY
        } else {
            self.fp as f64 / self.tp as f64
        }
    }
}

/// Operating points sorted by ascending threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricCurve {
    pub points: Vec<MetricPoint>,
}

impl MetricCurve {
    /// One point per distinct score, alarms firing at `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Result<Self> {
        check_lengths(scores, labels)?;
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < idx.len() {
            let thr = scores[idx[i]];
            while i < idx.len() && scores[idx[i]] == thr {
                if labels[idx[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(MetricPoint {
                threshold: thr,
                tp,
                fp,
                tn: neg - fp,
                fn_: pos - tp,
            });
        }
        points.reverse();
        Ok(MetricCurve { points })
    }
}

/// False alarms per true alarm at the largest threshold whose sensitivity
/// reaches `sensitivity`.
pub fn false_alarms_per_true_alarm(curve: &MetricCurve, sensitivity: f64) -> Result<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.sensitivity() >= sensitivity && p.tp > 0)
        .max_by(|a, b| a.threshold.total_cmp(&b.threshold))
        .map(|p| p.false_alarms_per_true_alarm())
        .ok_or_else(|| Error::UndefinedMetric(format!("sensitivity {sensitivity} is not attainable")))
}
