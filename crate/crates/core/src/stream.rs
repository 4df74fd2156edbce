//! Incremental scoring of encounter updates arriving one JSON line at a time.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{Dims, Encounter, Label, MedEvent, Observation};
use crate::error::{Error, Result};
use crate::eval::Scorer;

/// One update line: new observations and administrations for an encounter,
/// with `los` the current time since admission. `baseline` is required on
/// the first line of each encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterUpdate {
    pub id: String,
    pub los: f64,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub event_time: Option<f64>,
    #[serde(default)]
    pub baseline: Option<Vec<f64>>,
    #[serde(default)]
    pub obs: Vec<(usize, f64, f64)>,
    #[serde(default)]
    pub meds: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamScore<'a> {
    pub id: &'a str,
    pub hour: u64,
    pub risk: f64,
}

struct State {
    encounter: Encounter,
    /// Latest accepted event time.
    last_time: f64,
}

/// Accumulates updates per encounter and scores the current hour.
pub struct StreamScorer<'a> {
    scorer: &'a dyn Scorer,
    dims: Dims,
    states: HashMap<String, State>,
}

impl<'a> StreamScorer<'a> {
    pub fn new(scorer: &'a dyn Scorer, dims: Dims) -> Self {
        StreamScorer {
            scorer,
            dims,
            states: HashMap::new(),
        }
    }

    /// Applies one update and returns the risk at hour `floor(los)`. A
    /// rejected update leaves the stored encounter untouched.
    pub fn update(&mut self, u: EncounterUpdate) -> Result<(String, u64, f64)> {
        if !u.los.is_finite() || u.los < 0.0 {
            return Err(Error::validation(&u.id, "los", format!("{} is not a valid current time", u.los)));
        }
        let (mut enc, last_time) = match self.states.get(&u.id) {
            Some(s) => {
                if u.los < s.encounter.los {
                    return Err(Error::validation(&u.id, "los", format!("time went backwards from {} to {}", s.encounter.los, u.los)));
                }
                (s.encounter.clone(), s.last_time)
            }
            None => {
                let baseline = u
                    .baseline
                    .clone()
                    .ok_or_else(|| Error::validation(&u.id, "baseline", "required on the first update"))?;
                let enc = Encounter {
                    id: u.id.clone(),
                    los: u.los,
                    label: u.label.unwrap_or(Label::Control),
                    event_time: None,
                    prediction_time: None,
                    baseline,
                    observations: Vec::new(),
                    med_events: Vec::new(),
                };
                (enc, 0.0)
            }
        };
        if let Some(b) = &u.baseline {
            if *b != enc.baseline {
                return Err(Error::validation(&u.id, "baseline", "changed after the first update"));
            }
        }
        let mut newest = last_time;
        for &(series, time, value) in &u.obs {
            if time < last_time {
                return Err(Error::validation(&u.id, "obs", format!("time {time} precedes already accepted time {last_time}")));
            }
            newest = newest.max(time);
            enc.observations.push(Observation { series, time, value });
        }
        for &(drug, time) in &u.meds {
            if time < last_time {
                return Err(Error::validation(&u.id, "meds", format!("time {time} precedes already accepted time {last_time}")));
            }
            newest = newest.max(time);
            enc.med_events.push(MedEvent { drug, time });
        }
        enc.los = u.los;
        if let Some(l) = u.label {
            enc.label = l;
        }
        if u.event_time.is_some() {
            enc.event_time = u.event_time;
        }
        if enc.label == Label::Control {
            enc.event_time = None;
        }
        // outcome fields are carried along but not checked: a recorded event
        // may lie beyond the current time while streaming
        Encounter {
            label: Label::Control,
            event_time: None,
            ..enc.clone()
        }
        .validate(&self.dims)?;
        let hour = u.los.floor();
        let risk = self.scorer.score_at(&enc, hour)?;
        let id = u.id.clone();
        self.states.insert(
            u.id,
            State {
                encounter: enc,
                last_time: newest,
            },
        );
        Ok((id, hour as u64, risk))
    }

    /// Parses and applies one line, returning the JSON output line.
    pub fn process_line(&mut self, line: &str) -> Result<String> {
        let u: EncounterUpdate = serde_json::from_str(line)?;
        let (id, hour, risk) = self.update(u)?;
        Ok(serde_json::to_string(&StreamScore { id: &id, hour, risk })?)
    }
}

/// Splits an encounter into hourly updates: the line for hour `h` carries
/// events in `(h - 1, h]` (hour 0 carries those at admission).
pub fn hourly_updates(e: &Encounter) -> Vec<EncounterUpdate> {
    let last = e.los.floor().max(0.0) as usize;
    let bin = |t: f64| crate::rnn::bin_of(t);
    (0..=last)
        .map(|h| EncounterUpdate {
            id: e.id.clone(),
            los: h as f64,
            label: (h == 0).then_some(e.label),
            event_time: if h == 0 { e.event_time } else { None },
            baseline: (h == 0).then(|| e.baseline.clone()),
            obs: e
                .observations
                .iter()
                .filter(|o| bin(o.time) == h)
                .map(|o| (o.series, o.time, o.value))
                .collect(),
            meds: e.med_events.iter().filter(|m| bin(m.time) == h).map(|m| (m.drug, m.time)).collect(),
        })
        .collect()
}
