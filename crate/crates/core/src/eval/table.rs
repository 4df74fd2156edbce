//! Banded early-warning score tables (NEWS/MEWS style) loaded from config.
//!
//! Config format: a JSON object mapping variable name to a list of bands
//! `{"lo": f64|null, "hi": f64|null, "points": int}`. Bands are half-open
//! `[lo, hi)`, sorted, contiguous, and together cover the real line
//! (`null` means unbounded).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::cohort::Encounter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub points: u32,
}

impl Band {
    fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreTable {
    pub variables: BTreeMap<String, Vec<Band>>,
}

impl ScoreTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: ScoreTable = serde_json::from_str(text).map_err(|e| Error::Config(format!("score table: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Config("score table has no variables".into()));
        }
        for (name, bands) in &self.variables {
            let bad = |msg: &str| Err(Error::Config(format!("score table variable {name}: {msg}")));
            let (Some(first), Some(last)) = (bands.first(), bands.last()) else {
                return bad("no bands");
            };
            if first.lo.is_some() || last.hi.is_some() {
                return bad("bands must extend to -inf and +inf (use null)");
            }
            for w in bands.windows(2) {
                match (w[0].hi, w[1].lo) {
                    (Some(h), Some(l)) if h == l && w[1].hi.is_none_or(|h2| h2 > l) => {}
                    _ => return bad("bands must be contiguous and increasing"),
                }
            }
            if bands.iter().any(|b| b.lo.is_some_and(|x| !x.is_finite()) || b.hi.is_some_and(|x| !x.is_finite())) {
                return bad("non-finite band edge");
            }
        }
        Ok(())
    }

    /// Points for a variable with no value yet: its lowest-scoring band.
    pub fn normal_points(&self, name: &str) -> u32 {
        self.variables.get(name).map_or(0, |b| b.iter().map(|b| b.points).min().unwrap_or(0))
    }

    pub fn points(&self, name: &str, value: f64) -> Result<u32> {
        let bands = self
            .variables
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown score table variable {name}")))?;
        bands
            .iter()
            .find(|b| b.contains(value))
            .map(|b| b.points)
            .ok_or_else(|| Error::Domain(format!("value {value} of {name} falls outside every band")))
    }

    /// The minimum attainable total.
    pub fn minimum(&self) -> u32 {
        self.variables.keys().map(|k| self.normal_points(k)).sum()
    }
}

/// Sum of per-variable points for the current value of each table variable.
/// Variables absent from `frame` (or `None`) score their normal band.
pub fn table_score(frame: &HashMap<String, Option<f64>>, table: &ScoreTable) -> Result<u32> {
    let mut total = 0;
    for name in table.variables.keys() {
        total += match frame.get(name).copied().flatten() {
            Some(v) => table.points(name, v)?,
            None => table.normal_points(name),
        };
    }
    Ok(total)
}

/// Scores encounters with a table over their most recent observed values.
#[derive(Debug, Clone)]
pub struct TableScorer {
    table: ScoreTable,
    series: Vec<(String, usize)>,
}

impl TableScorer {
    pub fn new(table: ScoreTable, mapping: &HashMap<String, usize>) -> Result<Self> {
        table.validate()?;
        let series = table
            .variables
            .keys()
            .map(|k| {
                mapping
                    .get(k)
                    .map(|&m| (k.clone(), m))
                    .ok_or_else(|| Error::Config(format!("no series mapped to score table variable {k}")))
            })
            .collect::<Result<_>>()?;
        Ok(TableScorer { table, series })
    }

    /// Variable names are series indices written in decimal.
    pub fn with_index_names(table: ScoreTable) -> Result<Self> {
        let mut mapping = HashMap::new();
        for k in table.variables.keys() {
            let m: usize = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("score table variable {k:?} is not a series index")))?;
            mapping.insert(k.clone(), m);
        }
        Self::new(table, &mapping)
    }

    pub fn table(&self) -> &ScoreTable {
        &self.table
    }

    pub fn max_series(&self) -> Option<usize> {
        self.series.iter().map(|(_, m)| *m).max()
    }
}

impl Scorer for TableScorer {
    fn score_at(&self, e: &Encounter, horizon: f64) -> Result<f64> {
        let mut frame = HashMap::with_capacity(self.series.len());
        for (name, m) in &self.series {
            let mut latest: Option<(f64, f64)> = None;
            for o in e.observations.iter().filter(|o| o.series == *m && o.time <= horizon) {
                if latest.is_none_or(|(t, _)| o.time >= t) {
                    latest = Some((o.time, o.value));
                }
            }
            frame.insert(name.clone(), latest.map(|(_, v)| v));
        }
        Ok(table_score(&frame, &self.table)? as f64)
    }
}
