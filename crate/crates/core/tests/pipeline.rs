mod common;

use mgp_rnn::checkpoint::{load_checkpoint, save_checkpoint};
use mgp_rnn::cohort::Encounter;
use mgp_rnn::error::Result;
use mgp_rnn::eval::lookback::{default_horizons, lookback_eval};
use mgp_rnn::eval::Scorer;
use mgp_rnn::model::ModelKind;
use mgp_rnn::trainer::{split_encounters, train, train_with, TrainConfig};

struct Oracle;

impl Scorer for Oracle {
    fn score_at(&self, e: &Encounter, _: f64) -> Result<f64> {
        Ok(e.label.target())
    }
}

/// Label-blind pseudo-random score derived from the id.
struct Noise;

impl Scorer for Noise {
    fn score_at(&self, e: &Encounter, _: f64) -> Result<f64> {
        let h = e.id.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3));
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

#[test]
fn tiny_run_trains_saves_and_reloads() {
    let matched = common::small_matched(60, 2);
    for kind in [ModelKind::MgpRnn, ModelKind::RawRnn] {
        let cfg = TrainConfig { kind, ..common::quick_train_config() };
        let cp = train(&matched, &cfg).unwrap();
        assert_eq!(cp.meta.kind, kind);
        assert!(!cp.meta.history.is_empty() && cp.meta.history.len() <= 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, cp.meta);
        let e = &matched.encounters[0];
        assert_eq!(back.model.score_at(e, 3.0).unwrap(), cp.model.score_at(e, 3.0).unwrap());
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let matched = common::small_matched(30, 5);
    let cfg = TrainConfig { max_epochs: 0, ..common::quick_train_config() };
    let cp = train(&matched, &cfg).unwrap();
    assert_eq!(cp.meta.epoch, 0);
    assert!(cp.meta.history.is_empty());
    assert_eq!(cp.meta.best_epoch, None);
    // same seed, same initialization as the first epoch of a longer run
    let longer = train(&matched, &TrainConfig { max_epochs: 1, ..cfg.clone() }).unwrap();
    assert_ne!(longer.model.flat_params(), cp.model.flat_params());
}

#[test]
fn training_loss_decreases() {
    let matched = common::small_matched(50, 8);
    let cfg = TrainConfig {
        max_epochs: 20,
        patience: 100,
        learning_rate: 0.02,
        ..common::quick_train_config()
    };
    let mut losses = Vec::new();
    let cp = train_with(&matched, &cfg, |r| losses.push(r.train_loss)).unwrap();
    assert_eq!(losses.len(), cp.meta.history.len());
    let head: f64 = losses[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = losses[losses.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn early_stopping_keeps_the_best_validation_epoch() {
    let matched = common::small_matched(120, 9);
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 3,
        valid_fraction: 0.3,
        train_fraction: 0.6,
        ..common::quick_train_config()
    };
    let cp = train(&matched, &cfg).unwrap();
    let h = &cp.meta.history;
    let best = h
        .iter()
        .filter_map(|r| r.valid_auroc.map(|a| (r.epoch, a)))
        .fold(None, |acc: Option<(usize, f64)>, (e, a)| match acc {
            Some((_, b)) if b >= a => acc,
            _ => Some((e, a)),
        })
        .expect("validation split has both classes");
    assert_eq!(cp.meta.best_epoch, Some(best.0));
    assert_eq!(cp.meta.epoch, best.0);
    // stopped by patience or by the epoch cap
    let last = h.last().unwrap().epoch;
    assert!(last == cfg.max_epochs || last - best.0 == cfg.patience);
}

#[test]
fn monte_carlo_risk_converges() {
    let matched = common::small_matched(30, 4);
    let cp = train(&matched, &TrainConfig { max_epochs: 1, ..common::quick_train_config() }).unwrap();
    let e = matched.encounters.iter().find(|e| e.observations.len() >= 3).unwrap();
    let t = e.anchor().unwrap().floor();
    let singles: Vec<f64> = (0..400).map(|s| cp.model.final_probability_mc(e, t, 1, 1000 + s).unwrap()).collect();
    let mean = singles.iter().sum::<f64>() / singles.len() as f64;
    let sd = (singles.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (singles.len() - 1) as f64).sqrt();
    let a = cp.model.final_probability_mc(e, t, 10_000, 1).unwrap();
    let b = cp.model.final_probability_mc(e, t, 100_000, 2).unwrap();
    let se = sd * (1.0 / 10_000.0 + 1.0 / 100_000.0f64).sqrt();
    assert!((a - b).abs() <= 3.0 * se + 1e-12, "{a} vs {b}, se {se}");
}

#[test]
fn lookback_separates_oracle_from_noise() {
    let matched = common::small_matched(400, 12);
    let rows = lookback_eval(&Oracle, &matched.encounters, &default_horizons()).unwrap();
    assert_eq!(rows.len(), 13);
    for (h, r) in rows.iter().enumerate() {
        assert_eq!(r.horizon_hours, h as f64);
        assert_eq!((r.auroc, r.aupr, r.fa_per_ta_at_80sens), (1.0, 1.0, 0.0));
    }
    let rows = lookback_eval(&Noise, &matched.encounters, &[0.0]).unwrap();
    assert!((rows[0].auroc - 0.5).abs() < 0.15, "noise auroc {}", rows[0].auroc);
}

#[test]
fn lookback_on_held_out_split_is_deterministic() {
    let matched = common::small_matched(80, 6);
    let cfg = common::quick_train_config();
    let cp = train(&matched, &cfg).unwrap();
    let (_, _, test) = split_encounters(&matched.encounters, &cfg);
    let all: Vec<Encounter> = if test.iter().any(|e| e.is_case()) && test.iter().any(|e| !e.is_case()) {
        test
    } else {
        matched.encounters.clone()
    };
    let a = lookback_eval(&cp.model, &all, &[0.0, 2.0]).unwrap();
    let b = lookback_eval(&cp.model, &all, &[0.0, 2.0]).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.auroc)));
}
