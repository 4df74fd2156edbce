//! Case-control matching with prediction times at the same fraction of stay.

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Dims, Encounter};
use crate::error::{Error, Result};

/// Default number of controls per case.
pub const DEFAULT_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub case_id: String,
    pub control_ids: Vec<String>,
}

/// Matched cases and controls; every control carries its prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedCohort {
    pub dims: Dims,
    pub pairs: Vec<MatchedPair>,
    /// Cases and matched controls, sorted by id.
    pub encounters: Vec<Encounter>,
}

impl MatchedCohort {
    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Encounter> {
        self.encounters
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.encounters[i])
    }

    pub fn case_fraction(&self) -> f64 {
        let cases = self.encounters.iter().filter(|e| e.is_case()).count();
        cases as f64 / self.encounters.len().max(1) as f64
    }
}

fn features(e: &Encounter) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + e.baseline.len());
    f.push(e.los.max(1e-6).ln());
    f.extend_from_slice(&e.baseline);
    f
}

/// Per-feature scale over the pooled population; constant features get 1.
fn feature_scales(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    (0..d)
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| ((x - y) / s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Greedy nearest-neighbour matching of each case to `ratio` controls.
///
/// Cases are visited by descending LOS (ties by id) and take their nearest
/// remaining controls under standardized Euclidean distance on
/// (log LOS, baseline). A matched control's prediction time is the case's
/// event fraction applied to the control's LOS.
pub fn match_case_controls(cohort: &Cohort, ratio: usize) -> Result<MatchedCohort> {
    if ratio == 0 {
        return Err(Error::Config("matching ratio must be at least 1".into()));
    }
    let mut cases: Vec<&Encounter> = cohort.encounters.iter().filter(|e| e.is_case()).collect();
    let controls: Vec<&Encounter> = cohort.encounters.iter().filter(|e| !e.is_case()).collect();
    let required = ratio * cases.len();
    if controls.len() < required {
        return Err(Error::InsufficientControls { required, available: controls.len() });
    }
    for c in &cases {
        if c.event_time.is_none() {
            return Err(Error::validation(&c.id, "event_time", "case without event time"));
        }
    }
    cases.sort_by(|a, b| b.los.total_cmp(&a.los).then_with(|| a.id.cmp(&b.id)));

    let case_feats: Vec<Vec<f64>> = cases.iter().map(|e| features(e)).collect();
    let ctrl_feats: Vec<Vec<f64>> = controls.iter().map(|e| features(e)).collect();
    let pooled: Vec<Vec<f64>> = case_feats.iter().chain(&ctrl_feats).cloned().collect();
    let scale = feature_scales(&pooled);

    let mut taken = vec![false; controls.len()];
    let mut pairs = Vec::with_capacity(cases.len());
    let mut encounters = Vec::with_capacity(cases.len() * (ratio + 1));
    for (case, cf) in cases.iter().zip(&case_feats) {
        let mut cand: Vec<(f64, usize)> = (0..controls.len())
            .filter(|&i| !taken[i])
            .map(|i| (distance(cf, &ctrl_feats[i], &scale), i))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| controls[a.1].id.cmp(&controls[b.1].id)));
        let fraction = if case.los > 0.0 {
            case.event_time.expect("checked above") / case.los
        } else {
            0.0
        };
        let mut ids = Vec::with_capacity(ratio);
        for &(_, i) in cand.iter().take(ratio) {
            taken[i] = true;
            let mut ctrl = controls[i].clone();
            ctrl.prediction_time = Some((fraction * ctrl.los).clamp(0.0, ctrl.los));
            ids.push(ctrl.id.clone());
            encounters.push(ctrl);
        }
        pairs.push(MatchedPair { case_id: case.id.clone(), control_ids: ids });
        encounters.push((*case).clone());
    }
    encounters.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MatchedCohort { dims: cohort.dims, pairs, encounters })
}
