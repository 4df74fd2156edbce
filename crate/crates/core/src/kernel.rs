//! Multi-output GP prior: Ornstein-Uhlenbeck temporal correlations,
//! coregionalization matrices, per-series noise and medication-response means.
//!
//! Covariance between latent series `m` at time `t` and series `m'` at `t'` is
//! a sum of `Q` separable terms, `sum_q K_q[m, m'] * exp(-|t - t'| / l_q)`.
//! Observations add independent noise `sigma_m^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cohort::{Dims, Encounter, MedEvent};
use crate::error::{Error, Result};

/// Default number of separable mixture components.
pub const DEFAULT_COMPONENTS: usize = 3;
/// Default number of exponential terms per medication response curve.
pub const DEFAULT_MED_TERMS: usize = 3;
/// Added to the observation covariance diagonal before factorization.
pub const OBS_JITTER: f64 = 1e-6;

/// `exp(-|t - t'| / l)`.
pub fn ou_correlation(t: f64, t_prime: f64, lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) || !lengthscale.is_finite() {
        return Err(Error::Domain(format!("lengthscale must be positive, got {lengthscale}")));
    }
    if !t.is_finite() || !t_prime.is_finite() {
        return Err(Error::Domain("non-finite time".into()));
    }
    Ok((-(t - t_prime).abs() / lengthscale).exp())
}

/// All GP hyperparameters, stored in unconstrained form.
///
/// Lengthscales, noise standard deviations and medication decay rates are
/// exponentials of the stored values; each coregionalization matrix is
/// `L_q L_q^T` for the lower triangle `L_q` of `coreg_factor`. Entries above
/// the diagonal are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MgpParams {
    n_series: usize,
    n_drugs: usize,
    n_components: usize,
    n_med_terms: usize,
    /// `[Q]`
    pub log_lengthscale: Vec<f64>,
    /// `[Q][M][M]`, row-major per component.
    pub coreg_factor: Vec<f64>,
    /// `[M]`, log of the noise standard deviation.
    pub log_noise: Vec<f64>,
    /// `[L][P][M]`
    pub med_alpha: Vec<f64>,
    /// `[L][P][M]`
    pub med_log_beta: Vec<f64>,
}

impl MgpParams {
    pub fn zeros(n_series: usize, n_drugs: usize, n_components: usize, n_med_terms: usize) -> Self {
        MgpParams {
            n_series,
            n_drugs,
            n_components,
            n_med_terms,
            log_lengthscale: vec![0.0; n_components],
            coreg_factor: vec![0.0; n_components * n_series * n_series],
            log_noise: vec![0.0; n_series],
            med_alpha: vec![0.0; n_med_terms * n_drugs * n_series],
            med_log_beta: vec![0.0; n_med_terms * n_drugs * n_series],
        }
    }

    /// Same shape, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        MgpParams::zeros(self.n_series, self.n_drugs, self.n_components, self.n_med_terms)
    }

    /// Starting point for training: lengthscales spread over short, medium
    /// and long dynamics, near-identity coregionalization, noise at a tenth of
    /// each series' spread, and null medication effects.
    pub fn initialize<R: Rng + ?Sized>(
        dims: &Dims,
        n_components: usize,
        n_med_terms: usize,
        series_std: &[Option<f64>],
        rng: &mut R,
    ) -> Self {
        let m = dims.m;
        let mut p = MgpParams::zeros(m, dims.p, n_components, n_med_terms);
        for (q, l) in initial_lengthscales(n_components).into_iter().enumerate() {
            p.log_lengthscale[q] = l.ln();
        }
        let diag = (1.0 / n_components.max(1) as f64).sqrt();
        for q in 0..n_components {
            for i in 0..m {
                for j in 0..=i {
                    let eps: f64 = rng.sample(StandardNormal);
                    let base = if i == j { diag } else { 0.0 };
                    p.coreg_factor[(q * m + i) * m + j] = base + 0.01 * eps;
                }
            }
        }
        for (k, noise) in p.log_noise.iter_mut().enumerate() {
            let sd = series_std.get(k).copied().flatten().filter(|s| *s > 0.0).unwrap_or(1.0);
            *noise = (0.1 * sd).ln();
        }
        p
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn n_drugs(&self) -> usize {
        self.n_drugs
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_med_terms(&self) -> usize {
        self.n_med_terms
    }

    pub fn lengthscale(&self, q: usize) -> f64 {
        self.log_lengthscale[q].exp()
    }

    pub fn noise_var(&self, m: usize) -> f64 {
        (2.0 * self.log_noise[m]).exp()
    }

    pub(crate) fn factor_index(&self, q: usize, i: usize, j: usize) -> usize {
        (q * self.n_series + i) * self.n_series + j
    }

    pub(crate) fn med_index(&self, l: usize, p: usize, m: usize) -> usize {
        (l * self.n_drugs + p) * self.n_series + m
    }

    /// Lower-triangular factor `L_q`.
    pub fn coreg_lower(&self, q: usize) -> DMatrix<f64> {
        let m = self.n_series;
        DMatrix::from_fn(m, m, |i, j| if j <= i { self.coreg_factor[self.factor_index(q, i, j)] } else { 0.0 })
    }

    /// Coregionalization matrix `K_q = L_q L_q^T`.
    pub fn coreg(&self, q: usize) -> DMatrix<f64> {
        let l = self.coreg_lower(q);
        &l * l.transpose()
    }

    pub fn alpha(&self, l: usize, p: usize, m: usize) -> f64 {
        self.med_alpha[self.med_index(l, p, m)]
    }

    pub fn beta(&self, l: usize, p: usize, m: usize) -> f64 {
        self.med_log_beta[self.med_index(l, p, m)].exp()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: &[f64], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::dimension(format!("mgp.{name}"), len, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("mgp.{name} has non-finite entries")));
            }
            Ok(())
        };
        let (m, p, q, l) = (self.n_series, self.n_drugs, self.n_components, self.n_med_terms);
        if q == 0 {
            return Err(Error::Config("at least one mixture component is required".into()));
        }
        check("log_lengthscale", &self.log_lengthscale, q)?;
        check("coreg_factor", &self.coreg_factor, q * m * m)?;
        check("log_noise", &self.log_noise, m)?;
        check("med_alpha", &self.med_alpha, l * p * m)?;
        check("med_log_beta", &self.med_log_beta, l * p * m)?;
        Ok(())
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("mgp.log_lengthscale", &self.log_lengthscale),
            ("mgp.coreg_factor", &self.coreg_factor),
            ("mgp.log_noise", &self.log_noise),
            ("mgp.med_alpha", &self.med_alpha),
            ("mgp.med_log_beta", &self.med_log_beta),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            ("mgp.log_lengthscale", &mut self.log_lengthscale),
            ("mgp.coreg_factor", &mut self.coreg_factor),
            ("mgp.log_noise", &mut self.log_noise),
            ("mgp.med_alpha", &mut self.med_alpha),
            ("mgp.med_log_beta", &mut self.med_log_beta),
        ]
    }

    pub(crate) fn add_assign(&mut self, other: &MgpParams, scale: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn initial_lengthscales(q: usize) -> Vec<f64> {
    match q {
        0 => vec![],
        1 => vec![6.0],
        2 => vec![1.0, 24.0],
        _ => {
            let mut out = vec![1.0, 6.0, 24.0];
            while out.len() < q {
                let last = *out.last().unwrap();
                out.push(last * 4.0);
            }
            out
        }
    }
}

/// Prior mean of series `m` at time `t`: every administration strictly
/// before `t` contributes `sum_l alpha_lpm * exp(-beta_lpm * (t - t_p))`.
pub fn medication_mean(m: usize, t: f64, med_events: &[MedEvent], params: &MgpParams) -> f64 {
    let mut mu = 0.0;
    for ev in med_events {
        if ev.time < t {
            let dt = t - ev.time;
            for l in 0..params.n_med_terms {
                mu += params.alpha(l, ev.drug, m) * (-params.beta(l, ev.drug, m) * dt).exp();
            }
        }
    }
    mu
}

/// Hourly reference grid starting at admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::Domain("grid needs at least one point".into()));
        }
        Ok(GridSpec { n_points })
    }

    /// Grid covering `[0, horizon]`: `floor(horizon) + 1` points.
    pub fn for_horizon(horizon: f64) -> Self {
        let h = if horizon.is_finite() { horizon.max(0.0) } else { 0.0 };
        GridSpec {
            n_points: h.floor() as usize + 1,
        }
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64
    }

    /// Length of the latent vector `z` for `m` series.
    pub fn latent_len(&self, m: usize) -> usize {
        self.n_points * m
    }
}

/// Position of series `m` at grid point `j` in the latent vector. All series
/// for one grid time are contiguous.
pub const fn grid_index(j: usize, m: usize, n_series: usize) -> usize {
    j * n_series + m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub series: usize,
    pub time: f64,
}

/// Kernel with coregionalization matrices materialized once.
pub(crate) struct MixtureKernel {
    coregs: Vec<DMatrix<f64>>,
    lengthscales: Vec<f64>,
}

impl MixtureKernel {
    pub(crate) fn new(params: &MgpParams) -> Self {
        MixtureKernel {
            coregs: (0..params.n_components).map(|q| params.coreg(q)).collect(),
            lengthscales: (0..params.n_components).map(|q| params.lengthscale(q)).collect(),
        }
    }

    #[inline]
    pub(crate) fn eval(&self, a: Point, b: Point) -> f64 {
        let dt = (a.time - b.time).abs();
        self.coregs
            .iter()
            .zip(&self.lengthscales)
            .map(|(k, l)| k[(a.series, b.series)] * (-dt / l).exp())
            .sum()
    }

    pub(crate) fn matrix(&self, rows: &[Point], cols: &[Point]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.eval(rows[i], cols[j]))
    }

    pub(crate) fn symmetric(&self, pts: &[Point]) -> DMatrix<f64> {
        let n = pts.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(pts[i], pts[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Accumulates the gradient of `sum_ab gbar[a, b] * k(rows[a], cols[b])`
    /// into coregionalization-matrix adjoints and log-lengthscale adjoints.
    pub(crate) fn backprop(
        &self,
        rows: &[Point],
        cols: &[Point],
        gbar: &DMatrix<f64>,
        coreg_bar: &mut [DMatrix<f64>],
        log_len_bar: &mut [f64],
    ) {
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in cols.iter().enumerate() {
                let g = gbar[(i, j)];
                if g == 0.0 {
                    continue;
                }
                let dt = (a.time - b.time).abs();
                for (q, (k, l)) in self.coregs.iter().zip(&self.lengthscales).enumerate() {
                    let corr = (-dt / l).exp();
                    coreg_bar[q][(a.series, b.series)] += g * corr;
                    log_len_bar[q] += g * k[(a.series, b.series)] * corr * dt / l;
                }
            }
        }
    }
}

/// Converts coregionalization-matrix adjoints into factor adjoints
/// (`(Kbar + Kbar^T) L`, lower triangle) and adds them to `grad`.
pub(crate) fn coreg_bar_to_factor(params: &MgpParams, coreg_bar: &[DMatrix<f64>], grad: &mut MgpParams) {
    let m = params.n_series;
    for (q, kbar) in coreg_bar.iter().enumerate() {
        let lower = params.coreg_lower(q);
        let lbar = (kbar + kbar.transpose()) * lower;
        for i in 0..m {
            for j in 0..=i {
                let idx = params.factor_index(q, i, j);
                grad.coreg_factor[idx] += lbar[(i, j)];
            }
        }
    }
}

/// Adds the gradient of `sum_a mbar[a] * mu(points[a])` to `grad`.
pub(crate) fn backprop_mean(points: &[Point], mbar: &[f64], med_events: &[MedEvent], params: &MgpParams, grad: &mut MgpParams) {
    for (pt, &g) in points.iter().zip(mbar) {
        if g == 0.0 {
            continue;
        }
        for ev in med_events {
            if ev.time < pt.time {
                let dt = pt.time - ev.time;
                for l in 0..params.n_med_terms {
                    let idx = params.med_index(l, ev.drug, pt.series);
                    let beta = params.med_log_beta[idx].exp();
                    let decay = (-beta * dt).exp();
                    grad.med_alpha[idx] += g * decay;
                    grad.med_log_beta[idx] -= g * params.med_alpha[idx] * decay * dt * beta;
                }
            }
        }
    }
}

/// Prior moments of one encounter restricted to its observed entries and
/// the reference grid.
#[derive(Debug, Clone)]
pub struct CovarianceBundle {
    pub obs_points: Vec<Point>,
    pub grid_points: Vec<Point>,
    /// Observed values, aligned with `obs_points`.
    pub y: DVector<f64>,
    /// Covariance of observations, including noise (no jitter).
    pub sigma_obs: DMatrix<f64>,
    /// Grid-by-observation cross covariance.
    pub k_cross: DMatrix<f64>,
    /// Grid covariance.
    pub k_grid: DMatrix<f64>,
    pub mu_obs: DVector<f64>,
    pub mu_grid: DVector<f64>,
}

impl CovarianceBundle {
    pub fn n_obs(&self) -> usize {
        self.obs_points.len()
    }
}

pub fn grid_points(grid: &GridSpec, n_series: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(grid.latent_len(n_series));
    for j in 0..grid.n_points {
        for m in 0..n_series {
            pts.push(Point {
                series: m,
                time: grid.time(j),
            });
        }
    }
    pts
}

/// Builds prior covariances and means at the observed `(series, time)` pairs
/// and at the grid. Only observed pairs enter; nothing is materialized for
/// missing entries.
pub fn assemble_covariances(e: &Encounter, grid: &GridSpec, params: &MgpParams) -> Result<CovarianceBundle> {
    if e.observations.is_empty() {
        return Err(Error::Data(format!("encounter {} has no observations", e.id)));
    }
    assemble_moments(e, grid, params)
}

/// As [`assemble_covariances`] but accepts encounters without observations.
pub(crate) fn assemble_moments(e: &Encounter, grid: &GridSpec, params: &MgpParams) -> Result<CovarianceBundle> {
    if grid.n_points == 0 {
        return Err(Error::Domain("empty grid".into()));
    }
    let kernel = MixtureKernel::new(params);
    let m = params.n_series;
    let obs_points: Vec<Point> = e
        .observations
        .iter()
        .map(|o| Point {
            series: o.series,
            time: o.time,
        })
        .collect();
    let grid_pts = grid_points(grid, m);
    let y = DVector::from_iterator(obs_points.len(), e.observations.iter().map(|o| o.value));
    let mut sigma_obs = kernel.symmetric(&obs_points);
    for (a, pt) in obs_points.iter().enumerate() {
        sigma_obs[(a, a)] += params.noise_var(pt.series);
    }
    let k_cross = kernel.matrix(&grid_pts, &obs_points);
    let k_grid = kernel.symmetric(&grid_pts);
    let mean_at = |pts: &[Point]| {
        DVector::from_iterator(pts.len(), pts.iter().map(|p| medication_mean(p.series, p.time, &e.med_events, params)))
    };
    Ok(CovarianceBundle {
        mu_obs: mean_at(&obs_points),
        mu_grid: mean_at(&grid_pts),
        obs_points,
        grid_points: grid_pts,
        y,
        sigma_obs,
        k_cross,
        k_grid,
    })
}
