//! Encounter data model and the JSON-lines cohort format.
//!
//! A cohort file starts with a header object `{"M":..,"B":..,"P":..}` and is
//! followed by one encounter object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cohort shape: physiological series, baseline covariates, medication classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "P")]
    pub p: usize,
}

impl Dims {
    pub const fn new(m: usize, b: usize, p: usize) -> Self {
        Dims { m, b, p }
    }

    /// Width of one classifier input frame: latent values, baseline,
    /// medication counts and missingness indicators.
    pub const fn frame_width(&self) -> usize {
        self.m + self.b + self.p + self.m
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::new(34, 35, 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Case => 1.0,
            Label::Control => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub series: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedEvent {
    pub drug: usize,
    pub time: f64,
}

/// One admission: irregular observations, medication administrations,
/// baseline covariates and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Encounter {
    pub id: String,
    /// Length of stay in hours.
    pub los: f64,
    pub label: Label,
    /// Hours since admission at which the outcome definition was met (cases).
    pub event_time: Option<f64>,
    /// Matched prediction time (controls, assigned by matching only).
    pub prediction_time: Option<f64>,
    pub baseline: Vec<f64>,
    pub observations: Vec<Observation>,
    pub med_events: Vec<MedEvent>,
}

impl Encounter {
    pub fn is_case(&self) -> bool {
        self.label == Label::Case
    }

    /// Event time for cases, matched prediction time for controls.
    pub fn anchor(&self) -> Option<f64> {
        match self.label {
            Label::Case => self.event_time,
            Label::Control => self.prediction_time,
        }
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(Error::validation(id, "id", "empty id"));
        }
        if !self.los.is_finite() || self.los < 0.0 {
            return Err(Error::validation(id, "los", format!("{} is not a finite non-negative length of stay", self.los)));
        }
        if self.baseline.len() != dims.b {
            return Err(Error::validation(
                id,
                "baseline",
                format!("length {} but B = {}", self.baseline.len(), dims.b),
            ));
        }
        if self.baseline.iter().any(|b| !b.is_finite()) {
            return Err(Error::validation(id, "baseline", "non-finite entry"));
        }
        let time_ok = |t: f64| t.is_finite() && t >= 0.0 && t <= self.los;
        for (k, o) in self.observations.iter().enumerate() {
            if o.series >= dims.m {
                return Err(Error::validation(id, "obs", format!("entry {k}: series {} >= M = {}", o.series, dims.m)));
            }
            if !time_ok(o.time) {
                return Err(Error::validation(id, "obs", format!("entry {k}: time {} outside [0, {}]", o.time, self.los)));
            }
            if !o.value.is_finite() {
                return Err(Error::validation(id, "obs", format!("entry {k}: non-finite value")));
            }
        }
        for (k, med) in self.med_events.iter().enumerate() {
            if med.drug >= dims.p {
                return Err(Error::validation(id, "meds", format!("entry {k}: drug {} >= P = {}", med.drug, dims.p)));
            }
            if !time_ok(med.time) {
                return Err(Error::validation(id, "meds", format!("entry {k}: time {} outside [0, {}]", med.time, self.los)));
            }
        }
        match (self.label, self.event_time) {
            (Label::Case, None) => return Err(Error::validation(id, "event_time", "case without event time")),
            (Label::Case, Some(t)) if !time_ok(t) => {
                return Err(Error::validation(id, "event_time", format!("{t} outside [0, {}]", self.los)))
            }
            (Label::Case, Some(_)) => {
                if self.prediction_time.is_some() {
                    return Err(Error::validation(id, "prediction_time", "set on a case"));
                }
            }
            (Label::Control, Some(_)) => return Err(Error::validation(id, "event_time", "set on a control")),
            (Label::Control, None) => {
                if let Some(t) = self.prediction_time {
                    if !time_ok(t) {
                        return Err(Error::validation(id, "prediction_time", format!("{t} outside [0, {}]", self.los)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy holding only data recorded at or before `horizon` (inclusive).
    /// Label, length of stay and anchor times are preserved.
    pub fn truncate(&self, horizon: f64) -> Encounter {
        Encounter {
            observations: self.observations.iter().filter(|o| o.time <= horizon).copied().collect(),
            med_events: self.med_events.iter().filter(|m| m.time <= horizon).copied().collect(),
            ..self.clone()
        }
    }
}

/// Free-function form of [`Encounter::truncate`].
pub fn truncate_encounter(e: &Encounter, horizon: f64) -> Encounter {
    e.truncate(horizon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dims: Dims,
    pub encounters: Vec<Encounter>,
}

impl Cohort {
    pub fn new(dims: Dims, encounters: Vec<Encounter>) -> Result<Self> {
        let cohort = Cohort { dims, encounters };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.encounters {
            e.validate(&self.dims)?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation(&e.id, "id", "duplicate id"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    pub fn case_count(&self) -> usize {
        self.encounters.iter().filter(|e| e.is_case()).count()
    }

    pub fn get(&self, id: &str) -> Option<&Encounter> {
        self.encounters.iter().find(|e| e.id == id)
    }

    /// Per-series median of all observed values; `default` where a series
    /// is never observed.
    pub fn series_medians(&self, default: f64) -> Vec<f64> {
        let mut per_series = vec![Vec::new(); self.dims.m];
        for e in &self.encounters {
            for o in &e.observations {
                per_series[o.series].push(o.value);
            }
        }
        per_series
            .into_iter()
            .map(|mut v| {
                if v.is_empty() {
                    return default;
                }
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            })
            .collect()
    }

    /// Per-series standard deviation of observed values (population form).
    pub fn series_std(&self) -> Vec<Option<f64>> {
        let mut acc = vec![(0usize, 0.0f64, 0.0f64); self.dims.m];
        for e in &self.encounters {
            for o in &e.observations {
                let a = &mut acc[o.series];
                a.0 += 1;
                a.1 += o.value;
                a.2 += o.value * o.value;
            }
        }
        acc.into_iter()
            .map(|(n, s, ss)| {
                if n < 2 {
                    return None;
                }
                let mean = s / n as f64;
                let var = (ss / n as f64 - mean * mean).max(0.0);
                Some(var.sqrt())
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        write_cohort(self, &mut out)?;
        Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
    }
}

/// One line of the cohort file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterRecord {
    pub id: String,
    pub los: f64,
    pub label: Label,
    pub event_time: Option<f64>,
    pub baseline: Vec<f64>,
    pub obs: Vec<(usize, f64, f64)>,
    pub meds: Vec<(usize, f64)>,
}

impl From<&Encounter> for EncounterRecord {
    fn from(e: &Encounter) -> Self {
        EncounterRecord {
            id: e.id.clone(),
            los: e.los,
            label: e.label,
            event_time: e.event_time,
            baseline: e.baseline.clone(),
            obs: e.observations.iter().map(|o| (o.series, o.time, o.value)).collect(),
            meds: e.med_events.iter().map(|m| (m.drug, m.time)).collect(),
        }
    }
}

impl From<EncounterRecord> for Encounter {
    fn from(r: EncounterRecord) -> Self {
        Encounter {
            id: r.id,
            los: r.los,
            label: r.label,
            event_time: r.event_time,
            prediction_time: None,
            baseline: r.baseline,
            observations: r
                .obs
                .into_iter()
                .map(|(series, time, value)| Observation { series, time, value })
                .collect(),
            med_events: r.meds.into_iter().map(|(drug, time)| MedEvent { drug, time }).collect(),
        }
    }
}

pub fn parse_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let file = File::open(path)?;
    read_cohort(BufReader::new(file))
}

pub fn read_cohort(reader: impl BufRead) -> Result<Cohort> {
    let mut lines = reader.lines().enumerate();
    let dims: Dims = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header record".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
        }
    };
    let mut encounters = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EncounterRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let e = Encounter::from(record);
        e.validate(&dims)?;
        if !seen.insert(e.id.clone()) {
            return Err(Error::validation(&e.id, "id", format!("duplicate id on line {}", i + 1)));
        }
        encounters.push(e);
    }
    Ok(Cohort { dims, encounters })
}

pub fn write_cohort(cohort: &Cohort, mut out: impl Write) -> Result<()> {
    serde_json::to_writer(&mut out, &cohort.dims)?;
    out.write_all(b"\n")?;
    for e in &cohort.encounters {
        serde_json::to_writer(&mut out, &EncounterRecord::from(e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    write_cohort(cohort, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims::new(2, 1, 1)
    }

    fn sample(id: &str) -> Encounter {
        Encounter {
            id: id.into(),
            los: 12.0,
            label: Label::Control,
            event_time: None,
            prediction_time: None,
            baseline: vec![0.5],
            observations: vec![
                Observation { series: 0, time: 3.0, value: 1.0 },
                Observation { series: 1, time: 10.5, value: -2.0 },
                Observation { series: 0, time: 11.0, value: 0.25 },
            ],
            med_events: vec![MedEvent { drug: 0, time: 0.0 }],
        }
    }

    #[test]
    fn header_only_file_is_empty_cohort() {
        let c = read_cohort("{\"M\":3,\"B\":4,\"P\":5}\n".as_bytes()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.dims, Dims::new(3, 4, 5));
    }

    #[test]
    fn missing_header_is_a_parse_error() {
        assert!(matches!(read_cohort("".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn negative_time_names_encounter() {
        let text = "{\"M\":1,\"B\":0,\"P\":0}\n{\"id\":\"bad\",\"los\":5.0,\"label\":\"control\",\"event_time\":null,\"baseline\":[],\"obs\":[[0,-1.0,2.0]],\"meds\":[]}\n";
        match read_cohort(text.as_bytes()) {
            Err(Error::Validation { id, field, .. }) => {
                assert_eq!(id, "bad");
                assert_eq!(field, "obs");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"M\":1,\"B\":0,\"P\":0}\n{\"id\":\"a\",\"los\":5.0,\"label\":\"control\",\"event_time\":null,\"baseline\":[],\"obs\":[],\"meds\":[]}\n{oops\n";
        assert!(matches!(read_cohort(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn three_encounter_round_trip() {
        let mut b = sample("b");
        b.label = Label::Case;
        b.event_time = Some(7.25);
        let c = Cohort::new(dims(), vec![sample("a"), b, sample("c")]).unwrap();
        let text = c.to_jsonl().unwrap();
        let back = read_cohort(text.as_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn case_control_field_rules() {
        let mut e = sample("x");
        e.event_time = Some(1.0);
        assert!(e.validate(&dims()).is_err());
        e.label = Label::Case;
        assert!(e.validate(&dims()).is_ok());
        e.prediction_time = Some(2.0);
        assert!(e.validate(&dims()).is_err());
        let mut c = sample("y");
        c.observations[0].series = 2;
        assert!(c.validate(&dims()).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Cohort::new(dims(), vec![sample("a"), sample("a")]).is_err());
    }

    #[test]
    fn truncation_boundaries() {
        let e = sample("t");
        assert_eq!(e.truncate(e.los), e);
        assert_eq!(e.truncate(100.0), e);
        let at0 = e.truncate(0.0);
        assert!(at0.observations.is_empty());
        assert_eq!(at0.med_events.len(), 1);
        let times: Vec<f64> = e.truncate(10.5).observations.iter().map(|o| o.time).collect();
        assert_eq!(times, vec![3.0, 10.5]);
        assert_eq!(e.truncate(10.5).los, e.los);
    }

    #[test]
    fn medians_and_std() {
        let c = Cohort::new(dims(), vec![sample("a")]).unwrap();
        assert_eq!(c.series_medians(9.0), vec![0.625, -2.0]);
        let sd = c.series_std();
        assert!((sd[0].unwrap() - 0.375).abs() < 1e-12);
        assert!(sd[1].is_none());
    }
}
