//! Runs the synthetic comparison for the seeds given on the command line.
//!
//!     cargo run --release --example synthetic_experiment -- 1 2 3

use std::time::Instant;

use mgp_rnn::eval::ScoreTable;
use mgp_rnn::experiment::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = ScoreTable::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic-news.json"))?;
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    for seed in if seeds.is_empty() { vec![1] } else { seeds } {
        let start = Instant::now();
        let report = run_experiment(&ExperimentConfig::synthetic(seed, table.clone()))?;
        println!("{}", serde_json::to_string(&report)?);
        eprintln!(
            "seed {seed}: {:.0}s auroc0 {:.3} beats_raw {} beats_table {}",
            start.elapsed().as_secs_f64(),
            report.mgp_lookback[0].auroc,
            report.beats_raw(),
            report.beats_table()
        );
    }
    Ok(())
}
