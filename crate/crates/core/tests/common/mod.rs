#![allow(dead_code)]

use mgp_rnn::cohort::{Cohort, Dims};
use mgp_rnn::matching::{match_case_controls, MatchedCohort};
use mgp_rnn::simulate::{simulate_cohort, SimConfig};
use mgp_rnn::trainer::TrainConfig;

/// Two series, one drug, one baseline covariate, short stays.
pub fn small_sim(n: usize, seed: u64) -> SimConfig {
    let mut sim = SimConfig::with_dims(Dims::new(2, 1, 1), n, seed);
    sim.mean_los_hours = 12.0;
    sim.sd_los_hours = 4.0;
    sim.obs_rate_per_series = 0.5;
    sim.med_rate_per_drug = 0.05;
    sim.case_rate = 0.15;
    sim.hazard_weights = vec![3.0, -3.0];
    sim.calibrate_bias();
    sim
}

pub fn small_cohort(n: usize, seed: u64) -> Cohort {
    simulate_cohort(&small_sim(n, seed)).unwrap()
}

pub fn small_matched(n: usize, seed: u64) -> MatchedCohort {
    match_case_controls(&small_cohort(n, seed), 2).unwrap()
}

pub fn quick_train_config() -> TrainConfig {
    TrainConfig {
        hidden: 4,
        max_epochs: 3,
        batch_size: 8,
        mc_samples: 2,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}
