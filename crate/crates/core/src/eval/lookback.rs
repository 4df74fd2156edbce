//! Matched lookback validation: score each matched encounter on data
//! truncated a fixed number of hours before its anchor.

use serde::Serialize;

use super::metrics::{false_alarms_per_true_alarm, pr_auc, roc_auc, MetricCurve};
use super::{labels_of, require_anchor, Scorer};
use crate::cohort::Encounter;
use crate::error::Result;

pub const FA_SENSITIVITY: f64 = 0.80;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LookbackRow {
    pub horizon_hours: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub fa_per_ta_at_80sens: f64,
    /// Encounters whose truncation point fell before admission and were
    /// scored on admission-time data instead.
    #[serde(skip)]
    pub clamped: usize,
}

/// Default horizons, 0 through 12 hours.
pub fn default_horizons() -> Vec<f64> {
    (0..=12).map(f64::from).collect()
}

/// Scores of `encounters` at `anchor - horizon`, with the count of
/// encounters clamped to admission.
pub fn lookback_scores(scorer: &dyn Scorer, encounters: &[Encounter], horizon: f64) -> Result<(Vec<f64>, usize)> {
    let one = |e: &Encounter| -> Result<(f64, bool)> {
        let t = require_anchor(e)? - horizon;
        Ok((scorer.score_at(e, t.max(0.0))?, t < 0.0))
    };
    #[cfg(feature = "parallel")]
    let scored: Vec<(f64, bool)> = {
        use rayon::prelude::*;
        encounters.par_iter().map(one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<(f64, bool)> = encounters.iter().map(one).collect::<Result<_>>()?;
    let clamped = scored.iter().filter(|s| s.1).count();
    if clamped > 0 {
        log::warn!("{clamped} encounters scored on admission data at horizon {horizon}");
    }
    Ok((scored.into_iter().map(|s| s.0).collect(), clamped))
}

/// One metric row per horizon over the matched population.
pub fn lookback_eval(scorer: &dyn Scorer, encounters: &[Encounter], horizons: &[f64]) -> Result<Vec<LookbackRow>> {
    let labels = labels_of(encounters);
    horizons
        .iter()
        .map(|&h| {
            let (scores, clamped) = lookback_scores(scorer, encounters, h)?;
            let curve = MetricCurve::from_scores(&scores, &labels)?;
            Ok(LookbackRow {
                horizon_hours: h,
                auroc: roc_auc(&scores, &labels)?,
                aupr: pr_auc(&scores, &labels)?,
                fa_per_ta_at_80sens: false_alarms_per_true_alarm(&curve, FA_SENSITIVITY)?,
                clamped,
            })
        })
        .collect()
}

/// CSV with header `horizon_hours,auroc,aupr,fa_per_ta_at_80sens`.
pub fn lookback_csv(rows: &[LookbackRow]) -> String {
    let mut out = String::from("horizon_hours,auroc,aupr,fa_per_ta_at_80sens\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.horizon_hours, r.auroc, r.aupr, r.fa_per_ta_at_80sens));
    }
    out
}
