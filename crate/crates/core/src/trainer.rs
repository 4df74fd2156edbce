//! Joint training of the GP hyperparameters and the classifier on the Monte
//! Carlo expected loss.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
use crate::cohort::{Cohort, Dims, Encounter};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, Scorer};
use crate::eval::carry_forward::carry_forward_inputs;
use crate::kernel::{GridSpec, MgpParams, DEFAULT_COMPONENTS, DEFAULT_MED_TERMS};
use crate::matching::MatchedCohort;
use crate::model::{encounter_rng, stable_hash, standard_normal, Imputer, Model, ModelGrad, ModelKind};
use crate::posterior::{cholesky_backward, cholesky_jittered, Conditioning, DRAW_JITTER};
use crate::rnn::{backward, forward_cached, replicated_loss_logits, target_steps, FrameTemplate, ReplicationWindow, RnnParams, DEFAULT_HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2_lambda: f64,
    pub rng_seed: u64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub hidden: usize,
    pub n_components: usize,
    pub n_med_terms: usize,
    pub window: ReplicationWindow,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::MgpRnn,
            learning_rate: 0.001,
            batch_size: 100,
            mc_samples: 10,
            max_epochs: 50,
            patience: 5,
            l2_lambda: 1e-4,
            rng_seed: 17,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            hidden: DEFAULT_HIDDEN,
            n_components: DEFAULT_COMPONENTS,
            n_med_terms: DEFAULT_MED_TERMS,
            window: ReplicationWindow::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden == 0 || self.n_components == 0 {
            return bad("hidden width and component count must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.l2_lambda >= 0.0) {
            return bad(format!("l2_lambda {} must be non-negative", self.l2_lambda));
        }
        let fr = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must be in [0, 1] and sum to 1"));
        }
        if self.train_fraction == 0.0 {
            return bad("train fraction must be positive".into());
        }
        if !(self.window.pre_hours >= 0.0 && self.window.post_hours >= 0.0) {
            return bad("replication window must have non-negative extents".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Split membership from a hash of the id under the seed; independent of
/// cohort order.
pub fn split_of(id: &str, seed: u64, cfg: &TrainConfig) -> Split {
    let mut x = stable_hash(id) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    let u = (x >> 11) as f64 / (1u64 << 53) as f64;
    if u < cfg.train_fraction {
        Split::Train
    } else if u < cfg.train_fraction + cfg.valid_fraction {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Partitions encounters into (train, valid, test), each sorted by id.
pub fn split_encounters(encounters: &[Encounter], cfg: &TrainConfig) -> (Vec<Encounter>, Vec<Encounter>, Vec<Encounter>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for e in encounters {
        match split_of(&e.id, cfg.rng_seed, cfg) {
            Split::Train => out.0.push(e.clone()),
            Split::Valid => out.1.push(e.clone()),
            Split::Test => out.2.push(e.clone()),
        }
    }
    for v in [&mut out.0, &mut out.1, &mut out.2] {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    out
}

/// An encounter cut at `anchor + post_hours` with its grid and targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub encounter: Encounter,
    pub grid: GridSpec,
    pub steps: Vec<usize>,
}

impl TrainingExample {
    pub fn new(e: &Encounter, window: &ReplicationWindow) -> Result<Self> {
        let anchor = e
            .anchor()
            .ok_or_else(|| Error::Data(format!("encounter {} has no anchor (unmatched control?)", e.id)))?;
        let horizon = (anchor + window.post_hours).min(e.los).max(0.0);
        let grid = GridSpec::for_horizon(horizon);
        let steps = target_steps(anchor, grid.n_points, window)?;
        Ok(TrainingExample {
            encounter: e.truncate(horizon),
            grid,
            steps,
        })
    }

    /// Latent dimension `X * M`.
    pub fn latent_len(&self, m: usize) -> usize {
        self.grid.latent_len(m)
    }
}

/// Sampled data loss of one example for fixed standard-normal draws `xis`
/// (one per Monte Carlo sample), with the gradient when `grad` is given.
/// The L2 penalty is not included.
pub fn example_objective(
    model: &Model,
    ex: &TrainingExample,
    xis: &[DVector<f64>],
    mut grad: Option<&mut ModelGrad>,
) -> Result<f64> {
    let dims = model.dims;
    let target = ex.encounter.label.target();
    let template = FrameTemplate::new(&ex.encounter, &ex.grid, &dims);
    match &model.imputer {
        Imputer::CarryForward { fill_values } => {
            let inputs = carry_forward_inputs(&ex.encounter, &ex.grid, &dims, fill_values);
            let cache = forward_cached(&model.rnn, inputs);
            let (loss, dl) = replicated_loss_logits(&cache.logits, &ex.steps, target);
            check_finite(loss, &ex.encounter.id)?;
            if let Some(g) = grad {
                backward(&model.rnn, &cache, &dl, &mut g.rnn);
            }
            Ok(loss)
        }
        Imputer::Mgp(params) => {
            if xis.is_empty() {
                return Err(Error::Config("at least one Monte Carlo draw is required".into()));
            }
            let n = ex.latent_len(dims.m);
            if let Some(bad) = xis.iter().find(|x| x.len() != n) {
                return Err(Error::dimension("noise vector", n, bad.len()));
            }
            let cond = Conditioning::new(&ex.encounter, &ex.grid, params, true)?;
            let cov = cond.cov.as_ref().expect("covariance requested");
            let r = cholesky_jittered(cov, DRAW_JITTER)?;
            let s = xis.len() as f64;
            let mut total = 0.0;
            let mut mean_bar = DVector::zeros(n);
            let mut r_bar = DMatrix::zeros(n, n);
            for xi in xis {
                let z = &cond.mean + &r * xi;
                let cache = forward_cached(&model.rnn, template.inputs(z.as_slice()));
                let (loss, mut dl) = replicated_loss_logits(&cache.logits, &ex.steps, target);
                check_finite(loss, &ex.encounter.id)?;
                total += loss;
                if let Some(g) = grad.as_deref_mut() {
                    dl.iter_mut().for_each(|d| *d /= s);
                    let dx = backward(&model.rnn, &cache, &dl, &mut g.rnn);
                    let z_bar = DVector::from_iterator(n, dx.iter().flat_map(|row| row[..dims.m].iter().copied()));
                    mean_bar += &z_bar;
                    r_bar.ger(1.0, &z_bar, xi, 1.0);
                }
            }
            if let Some(g) = grad {
                let cov_bar = cholesky_backward(&r, &r_bar);
                let mgp_grad = g.mgp.as_mut().expect("gradient shaped like the model");
                cond.backward(params, &ex.encounter.med_events, &mean_bar, &cov_bar, mgp_grad);
            }
            Ok(total / s)
        }
    }
}

fn check_finite(loss: f64, id: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss on encounter {id}")))
    }
}

/// Standard-normal draws for one example, a pure function of the seed and
/// encounter id.
pub fn example_noise(model: &Model, ex: &TrainingExample, samples: usize, seed: u64) -> Vec<DVector<f64>> {
    if model.mgp().is_none() {
        return Vec::new();
    }
    let n = ex.latent_len(model.dims.m);
    let mut rng = encounter_rng(seed, &ex.encounter.id);
    (0..samples).map(|_| standard_normal(n, &mut rng)).collect()
}

/// Outcome of evaluating a minibatch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean sampled loss over kept examples, L2 penalty included.
    pub loss: f64,
    pub grad: Option<ModelGrad>,
    /// Examples dropped because their posterior failed numerically.
    pub dropped: usize,
}

fn per_example<T: Send>(batch: &[&TrainingExample], f: impl Fn(&TrainingExample) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(|ex| f(ex)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(|ex| f(ex)).collect()
    }
}

/// Loss (and optionally gradient) of a minibatch with draws derived from
/// `seed`. Members are reduced in id order, so the result does not depend
/// on batch order or thread scheduling.
pub fn evaluate_batch(model: &Model, batch: &[&TrainingExample], samples: usize, l2_lambda: f64, seed: u64, with_grad: bool) -> Result<BatchResult> {
    let mut order: Vec<&TrainingExample> = batch.to_vec();
    order.sort_by(|a, b| a.encounter.id.cmp(&b.encounter.id));
    let results = per_example(&order, |ex| {
        let xis = example_noise(model, ex, samples, seed);
        let mut g = with_grad.then(|| model.zero_grad());
        let loss = example_objective(model, ex, &xis, g.as_mut());
        (loss, g)
    });
    let mut total = 0.0;
    let mut kept = 0usize;
    let mut dropped = 0usize;
    let mut grad = with_grad.then(|| model.zero_grad());
    for (ex, (loss, g)) in order.iter().zip(results) {
        match loss {
            Ok(l) => {
                total += l;
                kept += 1;
                if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                    acc.add_assign(&g, 1.0);
                }
            }
            Err(Error::Numerical(msg)) => {
                log::warn!("dropping encounter {} from batch: {msg}", ex.encounter.id);
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if kept == 0 {
        return Err(Error::Numerical(format!("all {dropped} encounters in the batch failed")));
    }
    let scale = 1.0 / kept as f64;
    if let Some(g) = grad.as_mut() {
        let zero = g.clone();
        g.add_assign(&zero, scale - 1.0);
        model.rnn.add_l2_grad(&mut g.rnn, l2_lambda);
    }
    Ok(BatchResult {
        loss: total * scale + l2_lambda * model.rnn.weight_sq_norm(),
        grad,
        dropped,
    })
}

/// Monte Carlo expected loss over `batch` with `samples` draws per encounter.
pub fn mc_expected_loss(model: &Model, batch: &[Encounter], samples: usize, l2_lambda: f64, window: &ReplicationWindow, seed: u64) -> Result<f64> {
    let examples = batch.iter().map(|e| TrainingExample::new(e, window)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    Ok(evaluate_batch(model, &refs, samples, l2_lambda, seed, false)?.loss)
}

/// Gradient of [`mc_expected_loss`] for the same draws (same `seed`).
pub fn compute_gradients(
    model: &Model,
    batch: &[Encounter],
    samples: usize,
    l2_lambda: f64,
    window: &ReplicationWindow,
    seed: u64,
) -> Result<(f64, ModelGrad)> {
    let examples = batch.iter().map(|e| TrainingExample::new(e, window)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let res = evaluate_batch(model, &refs, samples, l2_lambda, seed, true)?;
    let grad = res.grad.expect("requested gradient");
    if let Some(block) = grad.first_non_finite() {
        return Err(Error::Numerical(format!("non-finite gradient in {block}")));
    }
    Ok((res.loss, grad))
}

/// Fresh model with parameters drawn from `seed`.
pub fn initialize_model(dims: &Dims, training: &[Encounter], cfg: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pool = Cohort {
        dims: *dims,
        encounters: training.to_vec(),
    };
    let imputer = match cfg.kind {
        ModelKind::MgpRnn => Imputer::Mgp(MgpParams::initialize(dims, cfg.n_components, cfg.n_med_terms, &pool.series_std(), &mut rng)),
        ModelKind::RawRnn => Imputer::CarryForward {
            fill_values: pool.series_medians(0.0),
        },
    };
    let rnn = RnnParams::initialize(dims.frame_width(), cfg.hidden, &mut rng);
    let model = Model { dims: *dims, imputer, rnn };
    model.validate()?;
    Ok(model)
}

/// Validation AUROC of the final-step score at each anchor; `None` when the
/// split lacks a class.
pub fn validation_auroc(model: &Model, valid: &[Encounter]) -> Result<Option<f64>> {
    let labels: Vec<bool> = valid.iter().map(Encounter::is_case).collect();
    if !labels.contains(&true) || !labels.contains(&false) {
        return Ok(None);
    }
    let scores = crate::eval::lookback::lookback_scores(model as &dyn Scorer, valid, 0.0)?.0;
    roc_auc(&scores, &labels).map(Some)
}

fn batch_seed(base: u64, epoch: usize, batch: usize) -> u64 {
    stable_hash(&format!("{base}:{epoch}:{batch}"))
}

fn snapshot(model: &Model, cfg: &TrainConfig, epoch: usize, history: &[EpochRecord], best_epoch: Option<usize>) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta::new(model, cfg.clone(), epoch, history.to_vec(), best_epoch),
        model: model.clone(),
    }
}

/// Trains on the matched cohort; see [`train_with`].
pub fn train(matched: &MatchedCohort, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(matched, cfg, |_| {})
}

/// Trains with ADAM on shuffled minibatches and early stopping on
/// validation AUROC at the anchor. `on_epoch` sees each epoch's record.
///
/// Returns the best-validation parameters (the last ones when the
/// validation split lacks a class). A non-finite loss or gradient aborts
/// with the last good checkpoint attached to the error.
pub fn train_with(matched: &MatchedCohort, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Checkpoint> {
    cfg.validate()?;
    if matched.is_empty() {
        return Err(Error::Data("cannot train on an empty cohort".into()));
    }
    let (train_set, valid_set, _) = split_encounters(&matched.encounters, cfg);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let examples = train_set
        .iter()
        .map(|e| TrainingExample::new(e, &cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let mut model = initialize_model(&matched.dims, &train_set, cfg)?;
    let mut flat = model.flat_params();
    let mut adam = AdamState::new(flat.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best = snapshot(&model, cfg, 0, &history, None);
    let mut best_metric = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut dropped = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let diverged = |message: String, last: &Checkpoint| Error::Diverged {
                epoch,
                message,
                last_good: Box::new(last.clone()),
            };
            let res = match evaluate_batch(&model, &batch, cfg.mc_samples, cfg.l2_lambda, batch_seed(cfg.rng_seed, epoch, b), true) {
                Ok(r) => r,
                Err(Error::Numerical(m)) => return Err(diverged(m, &best)),
                Err(e) => return Err(e),
            };
            let grad = res.grad.expect("requested gradient");
            if !res.loss.is_finite() {
                return Err(diverged(format!("loss {} at batch {b}", res.loss), &best));
            }
            if let Some(block) = grad.first_non_finite() {
                return Err(diverged(format!("non-finite gradient in {block} at batch {b}"), &best));
            }
            adam.step(&mut flat, &grad.flat(), cfg.learning_rate)?;
            model.set_flat_params(&flat)?;
            loss_sum += res.loss;
            n_batches += 1;
            dropped += res.dropped;
        }
        let valid_auroc = match validation_auroc(&model, &valid_set) {
            Ok(v) => v,
            Err(Error::Numerical(m)) => return Err(Error::Diverged { epoch, message: m, last_good: Box::new(best) }),
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            valid_auroc,
            dropped,
        };
        on_epoch(&record);
        history.push(record);
        match valid_auroc {
            Some(v) if v > best_metric => {
                best_metric = v;
                stale = 0;
                best = snapshot(&model, cfg, epoch, &history, Some(epoch));
            }
            Some(_) => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            None => {
                best = snapshot(&model, cfg, epoch, &history, None);
            }
        }
    }
    best.meta.history = history;
    Ok(best)
}
