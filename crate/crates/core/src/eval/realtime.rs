//! Real-time validation: alarms on hourly score traces.

use serde::Serialize;

use super::metrics::{MetricCurve, MetricPoint};
use super::ScoreTrace;
use crate::cohort::Label;
use crate::error::{Error, Result};

/// Alarms earlier than this many hours before the event count as false.
pub const DEFAULT_WINDOW_HOURS: f64 = 48.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn point(&self, threshold: f64) -> MetricPoint {
        MetricPoint {
            threshold,
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Tn,
    Fn,
}

/// Running maximum of a trace, so the first crossing of any threshold is a
/// binary search.
struct PreparedTrace<'a> {
    trace: &'a ScoreTrace,
    running_max: Vec<f64>,
}

impl<'a> PreparedTrace<'a> {
    fn new(trace: &'a ScoreTrace) -> Result<Self> {
        if trace.label == Label::Case && trace.event_time.is_none() {
            return Err(Error::Data(format!("case trace {} has no event time", trace.encounter_id)));
        }
        let mut m = f64::NEG_INFINITY;
        let running_max = trace
            .scores
            .iter()
            .map(|&(_, s)| {
                m = m.max(s);
                m
            })
            .collect();
        Ok(PreparedTrace { trace, running_max })
    }

    fn first_alarm(&self, threshold: f64) -> Option<f64> {
        let k = self.running_max.partition_point(|&m| m < threshold);
        self.trace.scores.get(k).map(|&(h, _)| h)
    }

    fn outcome(&self, threshold: f64, window: f64) -> Outcome {
        let first = self.first_alarm(threshold);
        match self.trace.label {
            Label::Control => match first {
                None => Outcome::Tn,
                Some(_) => Outcome::Fp,
            },
            Label::Case => {
                let event = self.trace.event_time.expect("checked in new");
                match first {
                    None => Outcome::Fn,
                    Some(h) if h > event => Outcome::Fn,
                    Some(h) if h < event - window => Outcome::Fp,
                    Some(_) => Outcome::Tp,
                }
            }
        }
    }
}

fn tally(prepared: &[PreparedTrace<'_>], threshold: f64, window: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in prepared {
        match p.outcome(threshold, window) {
            Outcome::Tp => cm.tp += 1,
            Outcome::Fp => cm.fp += 1,
            Outcome::Tn => cm.tn += 1,
            Outcome::Fn => cm.fn_ += 1,
        }
    }
    cm
}

/// Classifies each encounter by its first hour with `score >= threshold`.
///
/// Controls: any alarm is a false positive, none a true negative. Cases: an
/// alarm within `window` hours before the event (inclusive) is a true
/// positive, an earlier one a false positive, and a later or missing one a
/// false negative.
pub fn realtime_confusion(traces: &[ScoreTrace], threshold: f64, window: f64) -> Result<ConfusionMatrix> {
    let prepared = traces.iter().map(PreparedTrace::new).collect::<Result<Vec<_>>>()?;
    Ok(tally(&prepared, threshold, window))
}

/// Confusion matrices at every distinct score plus one threshold above all
/// scores, sorted by threshold.
pub fn realtime_curve(traces: &[ScoreTrace], window: f64) -> Result<MetricCurve> {
    let prepared = traces.iter().map(PreparedTrace::new).collect::<Result<Vec<_>>>()?;
    let mut thresholds: Vec<f64> = traces.iter().flat_map(|t| t.scores.iter().map(|&(_, s)| s)).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let above = thresholds.last().map_or(1.0, |&m| if m < 1.0 { 1.0 + f64::EPSILON } else { m + 1.0 });
    thresholds.push(above);
    Ok(MetricCurve {
        points: thresholds.into_iter().map(|t| tally(&prepared, t, window).point(t)).collect(),
    })
}

/// Row of the real-time JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RealtimeRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: f64,
    pub precision: Option<f64>,
    pub fa_per_ta: Option<f64>,
}

impl From<&MetricPoint> for RealtimeRow {
    fn from(p: &MetricPoint) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        RealtimeRow {
            threshold: p.threshold,
            tp: p.tp,
            fp: p.fp,
            tn: p.tn,
            fn_: p.fn_,
            sensitivity: p.sensitivity(),
            precision: finite(p.precision()),
            fa_per_ta: finite(p.false_alarms_per_true_alarm()),
        }
    }
}
