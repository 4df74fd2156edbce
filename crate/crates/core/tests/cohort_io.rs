mod common;

use std::io::Write;

use approx::assert_relative_eq;
use mgp_rnn::cohort::{parse_cohort, read_cohort, save_cohort, write_cohort, Cohort, Dims, Encounter, Label, MedEvent, Observation};
use mgp_rnn::error::Error;
use proptest::prelude::*;

#[test]
fn file_round_trip_is_lossless() {
    let cohort = common::small_cohort(25, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    save_cohort(&cohort, &path).unwrap();
    let back = parse_cohort(&path).unwrap();
    assert_eq!(back, cohort);
    let first = std::fs::read(&path).unwrap();
    save_cohort(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn header_only_file_is_an_empty_cohort() {
    let c = read_cohort(&b"{\"M\":3,\"B\":1,\"P\":2}\n"[..]).unwrap();
    assert!(c.is_empty());
    assert_eq!(c.dims, Dims::new(3, 1, 2));
}

#[test]
fn empty_file_is_a_parse_error() {
    let err = read_cohort(&b""[..]).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn malformed_record_reports_its_line() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "{{\"M\":1,\"B\":0,\"P\":0}}").unwrap();
    writeln!(f, "{{\"id\":\"a\",\"los\":2,\"label\":\"control\",\"event_time\":null,\"baseline\":[],\"obs\":[],\"meds\":[]}}").unwrap();
    writeln!(f, "{{\"id\":\"b\",\"los\":").unwrap();
    let err = parse_cohort(f.path()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
}

#[test]
fn out_of_range_series_is_rejected() {
    let text = "{\"M\":1,\"B\":0,\"P\":0}\n{\"id\":\"a\",\"los\":2,\"label\":\"control\",\"event_time\":null,\"baseline\":[],\"obs\":[[1,0.5,1.0]],\"meds\":[]}\n";
    let err = read_cohort(text.as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Validation { field: "obs", .. }), "{err}");
}

#[test]
fn duplicate_ids_are_rejected() {
    let rec = "{\"id\":\"a\",\"los\":2,\"label\":\"control\",\"event_time\":null,\"baseline\":[],\"obs\":[],\"meds\":[]}\n";
    let text = format!("{{\"M\":1,\"B\":0,\"P\":0}}\n{rec}{rec}");
    let err = read_cohort(text.as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Validation { field: "id", .. }), "{err}");
}

#[test]
fn series_summaries_match_hand_values() {
    let e = |id: &str, obs: Vec<Observation>| Encounter {
        id: id.into(),
        los: 5.0,
        label: Label::Control,
        event_time: None,
        prediction_time: None,
        baseline: vec![],
        observations: obs,
        med_events: vec![],
    };
    let o = |series, value| Observation { series, time: 1.0, value };
    let c = Cohort::new(Dims::new(2, 0, 0), vec![e("a", vec![o(0, 1.0), o(0, 3.0)]), e("b", vec![o(0, 2.0), o(0, 10.0)])]).unwrap();
    let med = c.series_medians(-7.0);
    assert_relative_eq!(med[0], 2.5);
    assert_eq!(med[1], -7.0);
    let sd = c.series_std();
    // population standard deviation of 1, 2, 3, 10
    assert_relative_eq!(sd[0].unwrap(), (50.0f64 / 4.0).sqrt(), epsilon = 1e-12);
    assert_eq!(sd[1], None);
}

fn encounter_strategy() -> impl Strategy<Value = Encounter> {
    (0.0f64..100.0, any::<bool>(), -5.0f64..5.0).prop_flat_map(|(los, case, base)| {
        let obs = prop::collection::vec((0usize..3, 0.0..=los, -1e6f64..1e6), 0..12);
        let meds = prop::collection::vec((0usize..2, 0.0..=los), 0..5);
        (obs, meds, 0.0..=los).prop_map(move |(obs, meds, event)| Encounter {
            id: String::new(),
            los,
            label: if case { Label::Case } else { Label::Control },
            event_time: case.then_some(event),
            prediction_time: None,
            baseline: vec![base],
            observations: obs.into_iter().map(|(series, time, value)| Observation { series, time, value }).collect(),
            med_events: meds.into_iter().map(|(drug, time)| MedEvent { drug, time }).collect(),
        })
    })
}

proptest! {
    #[test]
    fn write_then_read_is_identity(mut encounters in prop::collection::vec(encounter_strategy(), 0..6)) {
        for (i, e) in encounters.iter_mut().enumerate() {
            e.id = format!("e{i}");
        }
        let cohort = Cohort::new(Dims::new(3, 1, 2), encounters).unwrap();
        let mut buf = Vec::new();
        write_cohort(&cohort, &mut buf).unwrap();
        let back = read_cohort(buf.as_slice()).unwrap();
        prop_assert_eq!(back, cohort);
    }
}
