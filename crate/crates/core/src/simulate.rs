//! Synthetic cohorts drawn from a known multi-output GP with a logistic
//! outcome hazard on the latent state.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::cohort::{Cohort, Dims, Encounter, Label, MedEvent, Observation};
use crate::error::{Error, Result};
use crate::kernel::{medication_mean, MgpParams, MixtureKernel, Point, DEFAULT_MED_TERMS};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_encounters: usize,
    /// Target outcome rate; [`SimConfig::calibrate_bias`] sets `hazard_bias`
    /// to reach it.
    pub case_rate: f64,
    pub dims: Dims,
    pub mean_los_hours: f64,
    pub sd_los_hours: f64,
    pub min_los_hours: f64,
    /// Expected observations per hour for each series.
    pub obs_rate_per_series: f64,
    /// Expected administrations per hour for each drug class.
    pub med_rate_per_drug: f64,
    pub ground_truth: MgpParams,
    pub hazard_weights: Vec<f64>,
    pub hazard_bias: f64,
    pub rng_seed: u64,
}

impl SimConfig {
    /// Cohort shape and stay lengths of a general inpatient population, with
    /// a hazard driven by the first few series.
    pub fn with_dims(dims: Dims, n_encounters: usize, rng_seed: u64) -> Self {
        let mut hazard_weights = vec![0.0; dims.m];
        for (m, w) in hazard_weights.iter_mut().enumerate().take(4) {
            *w = if m % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut cfg = SimConfig {
            n_encounters,
            case_rate: 0.214,
            dims,
            mean_los_hours: 121.7,
            sd_los_hours: 108.1,
            min_los_hours: 4.0,
            obs_rate_per_series: 0.1,
            med_rate_per_drug: 0.02,
            ground_truth: default_ground_truth(&dims),
            hazard_weights,
            hazard_bias: 0.0,
            rng_seed,
        };
        cfg.calibrate_bias();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.case_rate > 0.0 && self.case_rate < 1.0) {
            return bad(format!("case_rate {} outside (0, 1)", self.case_rate));
        }
        for (name, v) in [
            ("mean_los_hours", self.mean_los_hours),
            ("sd_los_hours", self.sd_los_hours),
            ("min_los_hours", self.min_los_hours),
            ("obs_rate_per_series", self.obs_rate_per_series),
            ("med_rate_per_drug", self.med_rate_per_drug),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.hazard_weights.len() != self.dims.m {
            return Err(Error::dimension("hazard_weights", self.dims.m, self.hazard_weights.len()));
        }
        if !self.hazard_bias.is_finite() || self.hazard_weights.iter().any(|w| !w.is_finite()) {
            return bad("non-finite hazard parameters".into());
        }
        let gt = &self.ground_truth;
        if gt.n_series() != self.dims.m || gt.n_drugs() != self.dims.p {
            return bad(format!(
                "ground truth shaped for M={}, P={} but cohort has M={}, P={}",
                gt.n_series(),
                gt.n_drugs(),
                self.dims.m,
                self.dims.p
            ));
        }
        gt.validate()?;
        for q in 0..gt.n_components() {
            let k = gt.coreg(q);
            if (0..self.dims.m).any(|m| k[(m, m)] <= 0.0) && self.dims.m > 0 {
                return bad(format!("ground-truth coregionalization matrix {q} is singular"));
            }
        }
        Ok(())
    }

    /// Variance of `w^T f(t)` under the ground-truth prior at a single time.
    pub fn hazard_signal_variance(&self) -> f64 {
        let mut k = DMatrix::zeros(self.dims.m, self.dims.m);
        for q in 0..self.ground_truth.n_components() {
            k += self.ground_truth.coreg(q);
        }
        let w = DVector::from_column_slice(&self.hazard_weights);
        (w.transpose() * k * w)[(0, 0)]
    }

    /// Chooses `hazard_bias` so the expected outcome rate under the prior
    /// (medication effects ignored) equals `case_rate`.
    pub fn calibrate_bias(&mut self) {
        let s = self.hazard_signal_variance().max(0.0).sqrt();
        let rate = |b: f64| -> f64 {
            // midpoint rule over +-8 sd of a centred normal
            let n = 400;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for i in 0..n {
                let x = -8.0 + 16.0 * (i as f64 + 0.5) / n as f64;
                let w = (-0.5 * x * x).exp();
                acc += w / (1.0 + (-(b + s * x)).exp());
                wsum += w;
            }
            acc / wsum
        };
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < self.case_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.hazard_bias = 0.5 * (lo + hi);
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::with_dims(Dims::default(), 1000, 17)
    }
}

/// Ground truth with the default dynamics: lengthscales 2, 8 and 24 hours
/// carrying 20%, 30% and 50% of a unit marginal variance, noise sd 0.3.
pub fn default_ground_truth(dims: &Dims) -> MgpParams {
    ground_truth(dims, &[2.0, 8.0, 24.0], &[0.2, 0.3, 0.5], 0.3)
}

/// Ground truth with one component per lengthscale, each contributing
/// `share` of the marginal variance of every series, moderate random
/// cross-series correlation, noise sd `noise_sd`, and small decaying
/// medication effects. Deterministic.
pub fn ground_truth(dims: &Dims, lengthscales: &[f64], shares: &[f64], noise_sd: f64) -> MgpParams {
    assert_eq!(lengthscales.len(), shares.len(), "one share per lengthscale");
    let m = dims.m;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut p = MgpParams::zeros(m, dims.p, lengthscales.len(), DEFAULT_MED_TERMS);
    for (q, (&len, &share)) in lengthscales.iter().zip(shares).enumerate() {
        p.log_lengthscale[q] = len.ln();
        for i in 0..m {
            // row i of L_q: unit diagonal plus correlated entries, rescaled to norm^2 = share
            let row: Vec<f64> = (0..=i)
                .map(|j| if j == i { 1.0 } else { 0.35 * rng.sample::<f64, _>(StandardNormal) })
                .collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, v) in row.iter().enumerate() {
                let idx = p.factor_index(q, i, j);
                p.coreg_factor[idx] = v * share.sqrt() / norm;
            }
        }
    }
    for v in &mut p.log_noise {
        *v = noise_sd.ln();
    }
    for l in 0..DEFAULT_MED_TERMS {
        for d in 0..dims.p {
            for s in 0..m {
                let idx = p.med_index(l, d, s);
                p.med_alpha[idx] = 0.3 * rng.sample::<f64, _>(StandardNormal) / (l + 1) as f64;
                p.med_log_beta[idx] = [0.5f64, 0.1, 0.02][l].ln();
            }
        }
    }
    p
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, min: f64) -> f64 {
    let dist = Normal::new(mean, sd).expect("validated sd");
    for _ in 0..10_000 {
        let x = dist.sample(rng);
        if x >= min {
            return x;
        }
    }
    min
}

fn poisson_times(rng: &mut ChaCha8Rng, rate: f64, horizon: f64) -> Vec<f64> {
    let lambda = rate * horizon;
    let n = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=horizon)).collect();
    ts.sort_by(f64::total_cmp);
    ts
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a cohort; a deterministic function of `cfg` (including the seed).
pub fn simulate_cohort(cfg: &SimConfig) -> Result<Cohort> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let kernel = MixtureKernel::new(&cfg.ground_truth);
    let mut encounters = Vec::with_capacity(cfg.n_encounters);
    for i in 0..cfg.n_encounters {
        let los = truncated_normal(&mut rng, cfg.mean_los_hours, cfg.sd_los_hours, cfg.min_los_hours);
        let baseline: Vec<f64> = (0..dims.b).map(|_| rng.sample(StandardNormal)).collect();
        let mut med_events: Vec<MedEvent> = Vec::new();
        for drug in 0..dims.p {
            for time in poisson_times(&mut rng, cfg.med_rate_per_drug, los) {
                med_events.push(MedEvent { drug, time });
            }
        }
        med_events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.drug.cmp(&b.drug)));
        let mut points: Vec<Point> = Vec::new();
        for series in 0..dims.m {
            for time in poisson_times(&mut rng, cfg.obs_rate_per_series, los) {
                points.push(Point { series, time });
            }
        }
        points.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.series.cmp(&b.series)));
        let n_obs = points.len();
        let candidate = rng.random_range(0.0..=los);
        points.extend((0..dims.m).map(|series| Point { series, time: candidate }));

        let cov = kernel.symmetric(&points);
        let chol = crate::posterior::cholesky_jittered(&cov, 1e-8)
            .map_err(|e| Error::Config(format!("ground-truth kernel is not positive definite: {e}")))?;
        let xi = DVector::from_iterator(points.len(), (0..points.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let dev = chol * xi;
        let latent: Vec<f64> = points
            .iter()
            .zip(dev.iter())
            .map(|(p, d)| medication_mean(p.series, p.time, &med_events, &cfg.ground_truth) + d)
            .collect();

        let observations: Vec<Observation> = points[..n_obs]
            .iter()
            .zip(&latent)
            .map(|(p, f)| {
                let noise: f64 = rng.sample(StandardNormal);
                Observation {
                    series: p.series,
                    time: p.time,
                    value: f + cfg.ground_truth.noise_var(p.series).sqrt() * noise,
                }
            })
            .collect();
        let signal: f64 = latent[n_obs..].iter().zip(&cfg.hazard_weights).map(|(f, w)| f * w).sum();
        let is_case = rng.random::<f64>() < logistic(cfg.hazard_bias + signal);
        encounters.push(Encounter {
            id: format!("enc-{i:06}"),
            los,
            label: if is_case { Label::Case } else { Label::Control },
            event_time: is_case.then_some(candidate),
            prediction_time: None,
            baseline,
            observations,
            med_events,
        });
    }
    Cohort::new(dims, encounters)
}
