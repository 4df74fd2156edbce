//! Validation protocols, metrics and baseline scorers.

pub mod carry_forward;
pub mod lookback;
pub mod metrics;
pub mod realtime;
pub mod table;

use serde::Serialize;

use crate::cohort::{Encounter, Label};
use crate::error::{Error, Result};
use crate::model::Model;

pub use lookback::{lookback_eval, LookbackRow};
pub use metrics::{false_alarms_per_true_alarm, pr_auc, roc_auc, MetricCurve, MetricPoint};
pub use realtime::{realtime_confusion, realtime_curve, ConfusionMatrix};
pub use table::{table_score, ScoreTable, TableScorer};

/// Anything that turns the data available up to some hour into a risk.
pub trait Scorer: Sync {
    /// Risk computed from data recorded at or before `horizon` hours.
    fn score_at(&self, e: &Encounter, horizon: f64) -> Result<f64>;
}

/// Deterministic model scoring at the imputer's point estimate.
impl Scorer for Model {
    fn score_at(&self, e: &Encounter, horizon: f64) -> Result<f64> {
        self.final_probability(e, horizon)
    }
}

/// Model scoring averaged over Monte Carlo posterior draws.
#[derive(Debug, Clone)]
pub struct McScorer<'a> {
    pub model: &'a Model,
    pub samples: usize,
    pub seed: u64,
}

impl Scorer for McScorer<'_> {
    fn score_at(&self, e: &Encounter, horizon: f64) -> Result<f64> {
        self.model.final_probability_mc(e, horizon, self.samples, self.seed)
    }
}

/// Hourly risk for one encounter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTrace {
    pub encounter_id: String,
    pub label: Label,
    pub event_time: Option<f64>,
    /// `(hour, risk)` with strictly increasing hours.
    pub scores: Vec<(f64, f64)>,
}

/// Scores every hour `0..=floor(los)` using only data up to that hour.
pub fn score_realtime(scorer: &dyn Scorer, e: &Encounter) -> Result<ScoreTrace> {
    let last = e.los.floor().max(0.0) as usize;
    let scores = (0..=last)
        .map(|h| Ok((h as f64, scorer.score_at(e, h as f64)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTrace {
        encounter_id: e.id.clone(),
        label: e.label,
        event_time: e.event_time,
        scores,
    })
}

/// Traces for many encounters, in input order.
pub fn score_realtime_all(scorer: &dyn Scorer, encounters: &[Encounter]) -> Result<Vec<ScoreTrace>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        encounters.par_iter().map(|e| score_realtime(scorer, e)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        encounters.iter().map(|e| score_realtime(scorer, e)).collect()
    }
}

pub(crate) fn labels_of(encounters: &[Encounter]) -> Vec<bool> {
    encounters.iter().map(Encounter::is_case).collect()
}

pub(crate) fn require_anchor(e: &Encounter) -> Result<f64> {
    e.anchor()
        .ok_or_else(|| Error::Data(format!("encounter {} has no anchor (unmatched control?)", e.id)))
}
