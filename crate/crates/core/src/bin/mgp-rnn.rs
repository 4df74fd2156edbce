use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mgp_rnn::checkpoint::Checkpoint;
use mgp_rnn::cohort::{parse_cohort, save_cohort, Cohort, Dims};
use mgp_rnn::eval::lookback::{default_horizons, lookback_csv, lookback_eval};
use mgp_rnn::eval::realtime::{realtime_confusion, realtime_curve, RealtimeRow, DEFAULT_WINDOW_HOURS};
use mgp_rnn::eval::{score_realtime_all, McScorer, MetricPoint, ScoreTable, Scorer, TableScorer};
use mgp_rnn::matching::{match_case_controls, DEFAULT_RATIO};
use mgp_rnn::model::ModelKind;
use mgp_rnn::simulate::{simulate_cohort, SimConfig};
use mgp_rnn::stream::StreamScorer;
use mgp_rnn::trainer::{split_encounters, train_with, TrainConfig};
use mgp_rnn::{Encounter, Error, Result};

#[derive(Parser)]
#[command(name = "mgp-rnn", version, about = "GP-imputed recurrent classifier for irregular clinical time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic cohort and write it as JSON lines.
    Simulate(SimulateArgs),
    /// Match cases to controls, train, and write a checkpoint.
    Train(TrainArgs),
    /// Matched lookback validation at horizons before the anchor.
    EvalLookback(LookbackArgs),
    /// Real-time alarm validation over hourly score traces.
    EvalRealtime(RealtimeArgs),
    /// Score encounter updates read from standard input.
    Score(ScoreArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// JSON file overriding simulation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Controls matched to each case.
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: usize,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Encounters to evaluate, chosen by the checkpoint's split.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Average the classifier over this many posterior draws instead of
    /// using the posterior mean.
    #[arg(long, default_value_t = 0)]
    mc_samples: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct LookbackArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated hours, or `a..b` for every hour from a to b.
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: usize,
}

#[derive(Args)]
struct RealtimeArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Model checkpoint; also fixes the split when scoring a baseline.
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Score with a table instead of the model.
    #[arg(long, value_enum, requires = "table_config")]
    baseline: Option<BaselineArg>,
    #[arg(long)]
    table_config: Option<PathBuf>,
    /// Report a single operating point instead of the whole curve.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WINDOW_HOURS)]
    window: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    MgpRnn,
    RawRnn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    News,
    Mews,
}

/// Simulation settings readable from a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimOverrides {
    #[serde(rename = "M")]
    m: Option<usize>,
    #[serde(rename = "B")]
    b: Option<usize>,
    #[serde(rename = "P")]
    p: Option<usize>,
    case_rate: Option<f64>,
    mean_los_hours: Option<f64>,
    sd_los_hours: Option<f64>,
    obs_rate_per_series: Option<f64>,
    med_rate_per_drug: Option<f64>,
    /// Multiplies the default hazard weights.
    hazard_scale: Option<f64>,
    hazard_weights: Option<Vec<f64>>,
    /// Explicit bias; otherwise derived from `case_rate`.
    hazard_bias: Option<f64>,
}

fn sim_config(args: &SimulateArgs) -> Result<SimConfig> {
    let o: SimOverrides = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SimOverrides::default(),
    };
    let d = Dims::default();
    let dims = Dims::new(o.m.unwrap_or(d.m), o.b.unwrap_or(d.b), o.p.unwrap_or(d.p));
    let mut cfg = SimConfig::with_dims(dims, args.n, args.seed);
    if let Some(v) = o.case_rate {
        cfg.case_rate = v;
    }
    cfg.mean_los_hours = o.mean_los_hours.unwrap_or(cfg.mean_los_hours);
    cfg.sd_los_hours = o.sd_los_hours.unwrap_or(cfg.sd_los_hours);
    cfg.obs_rate_per_series = o.obs_rate_per_series.unwrap_or(cfg.obs_rate_per_series);
    cfg.med_rate_per_drug = o.med_rate_per_drug.unwrap_or(cfg.med_rate_per_drug);
    if let Some(w) = o.hazard_weights {
        cfg.hazard_weights = w;
    }
    if let Some(s) = o.hazard_scale {
        cfg.hazard_weights.iter_mut().for_each(|w| *w *= s);
    }
    match o.hazard_bias {
        Some(b) => cfg.hazard_bias = b,
        None if cfg.hazard_weights.len() == dims.m => cfg.calibrate_bias(),
        None => {}
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct SimSummary {
    n: usize,
    case_rate: f64,
    mean_los: f64,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cohort = simulate_cohort(&sim_config(&args)?)?;
    save_cohort(&cohort, &args.out)?;
    let n = cohort.len();
    let summary = SimSummary {
        n,
        case_rate: if n == 0 { 0.0 } else { cohort.case_count() as f64 / n as f64 },
        mean_los: if n == 0 { 0.0 } else { cohort.encounters.iter().map(|e| e.los).sum::<f64>() / n as f64 },
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    cfg.rng_seed = args.seed;
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(m) = args.model {
        cfg.kind = match m {
            ModelArg::MgpRnn => ModelKind::MgpRnn,
            ModelArg::RawRnn => ModelKind::RawRnn,
        };
    }
    let cohort = parse_cohort(&args.cohort)?;
    let matched = match_case_controls(&cohort, args.ratio)?;
    let cp = train_with(&matched, &cfg, |rec| {
        if let Ok(line) = serde_json::to_string(rec) {
            eprintln!("{line}");
        }
    });
    match cp {
        Ok(cp) => cp.save(&args.out),
        Err(Error::Diverged { epoch, message, last_good }) => {
            last_good.save(&args.out)?;
            Err(Error::Numerical(format!(
                "training diverged at epoch {epoch} ({message}); last good checkpoint written to {}",
                args.out.display()
            )))
        }
        Err(e) => Err(e),
    }
}

fn select(encounters: &[Encounter], split: SplitArg, cfg: &TrainConfig) -> Vec<Encounter> {
    if split == SplitArg::All {
        let mut all = encounters.to_vec();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        return all;
    }
    let (train, valid, test) = split_encounters(encounters, cfg);
    match split {
        SplitArg::Train => train,
        SplitArg::Valid => valid,
        _ => test,
    }
}

fn parse_horizons(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse horizons {text:?}"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..=b).map(f64::from).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()).and_then(|h| if h >= 0.0 { Ok(h) } else { Err(bad()) }))
        .collect()
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_for(path: &Path, cohort: &Cohort) -> Result<Checkpoint> {
    let cp = Checkpoint::load(path)?;
    cp.check_dims(&cohort.dims)?;
    Ok(cp)
}

fn cmd_eval_lookback(args: LookbackArgs) -> Result<()> {
    let cohort = parse_cohort(&args.common.cohort)?;
    let cp = load_for(&args.checkpoint, &cohort)?;
    let matched = match_case_controls(&cohort, args.ratio)?;
    let encounters = select(&matched.encounters, args.common.split, &cp.meta.config);
    let horizons = match &args.horizons {
        Some(h) => parse_horizons(h)?,
        None => default_horizons(),
    };
    let mc = McScorer {
        model: &cp.model,
        samples: args.common.mc_samples,
        seed: args.common.seed,
    };
    let scorer: &dyn Scorer = if args.common.mc_samples > 0 { &mc } else { &cp.model };
    let rows = lookback_eval(scorer, &encounters, &horizons)?;
    write_output(args.common.out.as_deref(), &lookback_csv(&rows))
}

fn cmd_eval_realtime(args: RealtimeArgs) -> Result<()> {
    let cohort = parse_cohort(&args.common.cohort)?;
    let cp = args.checkpoint.as_deref().map(|p| load_for(p, &cohort)).transpose()?;
    let split_cfg = cp.as_ref().map_or_else(
        || TrainConfig {
            rng_seed: args.common.seed,
            ..TrainConfig::default()
        },
        |c| c.meta.config.clone(),
    );
    let encounters = select(&cohort.encounters, args.common.split, &split_cfg);
    let table_scorer;
    let mc;
    let scorer: &dyn Scorer = match (args.baseline, &cp) {
        (Some(_), _) => {
            let path = args.table_config.as_ref().expect("clap enforces --table-config");
            let scorer = TableScorer::with_index_names(ScoreTable::load(path)?)?;
            if let Some(m) = scorer.max_series() {
                if m >= cohort.dims.m {
                    return Err(Error::Config(format!("score table refers to series {m} but the cohort has M = {}", cohort.dims.m)));
                }
            }
            table_scorer = scorer;
            &table_scorer
        }
        (None, Some(c)) if args.common.mc_samples > 0 => {
            mc = McScorer {
                model: &c.model,
                samples: args.common.mc_samples,
                seed: args.common.seed,
            };
            &mc
        }
        (None, Some(c)) => &c.model,
        (None, None) => unreachable!("clap requires --checkpoint or --baseline"),
    };
    let traces = score_realtime_all(scorer, &encounters)?;
    let text = match args.threshold {
        Some(t) => {
            let cm = realtime_confusion(&traces, t, args.window)?;
            let p = MetricPoint { threshold: t, tp: cm.tp, fp: cm.fp, tn: cm.tn, fn_: cm.fn_ };
            serde_json::to_string_pretty(&RealtimeRow::from(&p))?
        }
        None => {
            let curve = realtime_curve(&traces, args.window)?;
            let rows: Vec<RealtimeRow> = curve.points.iter().map(RealtimeRow::from).collect();
            serde_json::to_string_pretty(&rows)?
        }
    };
    write_output(args.common.out.as_deref(), &(text + "\n"))
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let cp = Checkpoint::load(&args.checkpoint)?;
    let mut stream = StreamScorer::new(&cp.model, cp.model.dims);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match stream.process_line(&line) {
            Ok(s) => {
                writeln!(out, "{s}")?;
                out.flush()?;
            }
            Err(e) => eprintln!("line {}: rejected: {e}", i + 1),
        }
    }
    Ok(())
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("MGP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalLookback(a) => cmd_eval_lookback(a),
        Command::EvalRealtime(a) => cmd_eval_realtime(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
