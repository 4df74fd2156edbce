//! Conditional Gaussian posterior of the latent grid values and
//! reparameterized draws from it.
//!
//! The forward pass keeps the intermediates needed to push adjoints of the
//! posterior mean and Cholesky factor back onto the kernel hyperparameters.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cohort::Encounter;
use crate::error::{Error, Result};
use crate::kernel::{self, assemble_covariances, CovarianceBundle, GridSpec, MgpParams, MixtureKernel, OBS_JITTER};
use crate::lanczos::lanczos_sqrt_mv;

/// Added to the posterior covariance diagonal before drawing exact samples.
pub const DRAW_JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Lower-triangular `R` with `R R^T = cov` (up to jitter).
    pub factor: Option<DMatrix<f64>>,
}

impl PosteriorGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Cholesky factor, computed on demand when not cached.
    pub fn factor(&self) -> Result<Cow<'_, DMatrix<f64>>> {
        match &self.factor {
            Some(f) => Ok(Cow::Borrowed(f)),
            None => Ok(Cow::Owned(cholesky_jittered(&self.cov, DRAW_JITTER)?)),
        }
    }

    pub fn with_factor(mut self) -> Result<Self> {
        if self.factor.is_none() {
            self.factor = Some(cholesky_jittered(&self.cov, DRAW_JITTER)?);
        }
        Ok(self)
    }
}

/// Lower Cholesky factor of `a + jitter * I`.
pub fn cholesky_jittered(a: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += jitter;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entries in covariance".into()));
    }
    match m.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => {
            let eig = SymmetricEigen::new(m).eigenvalues;
            let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            Err(Error::Numerical(format!(
                "Cholesky failed on {n}x{n} matrix (eigenvalues in [{min:.3e}, {max:.3e}], condition estimate {:.3e})",
                max / min.abs().max(f64::MIN_POSITIVE)
            )))
        }
    }
}

/// Posterior of latent grid values given the encounter's observations:
/// `mean = mu_grid + K_zy S^-1 (y - mu_obs)`, `cov = K_zz - K_zy S^-1 K_yz`.
pub fn compute_posterior(e: &Encounter, grid: &GridSpec, params: &MgpParams) -> Result<PosteriorGaussian> {
    let bundle = assemble_covariances(e, grid, params)?;
    let c = Conditioning::from_bundle(bundle, true)?;
    Ok(PosteriorGaussian {
        mean: c.mean,
        cov: c.cov.expect("requested covariance"),
        factor: None,
    })
}

/// Prior over the grid: used when nothing has been observed yet.
pub fn prior_gaussian(e: &Encounter, grid: &GridSpec, params: &MgpParams) -> Result<PosteriorGaussian> {
    let mut stripped = e.clone();
    stripped.observations.clear();
    let bundle = kernel::assemble_moments(&stripped, grid, params)?;
    Ok(PosteriorGaussian {
        mean: bundle.mu_grid,
        cov: bundle.k_grid,
        factor: None,
    })
}

/// Posterior mean only; falls back to the prior mean without observations.
pub fn posterior_mean(e: &Encounter, grid: &GridSpec, params: &MgpParams) -> Result<DVector<f64>> {
    let bundle = kernel::assemble_moments(e, grid, params)?;
    Ok(Conditioning::from_bundle(bundle, false)?.mean)
}

/// `z = mean + R xi`.
pub fn draw_exact(post: &PosteriorGaussian, xi: &DVector<f64>) -> Result<DVector<f64>> {
    if xi.len() != post.dim() {
        return Err(Error::dimension("xi", post.dim(), xi.len()));
    }
    let r = post.factor()?;
    Ok(&post.mean + r.as_ref() * xi)
}

/// `z = mean + A^{1/2} xi` with the square root applied by `k` Lanczos steps
/// against the covariance action `cov_action`.
pub fn draw_lanczos<F>(mean: &DVector<f64>, cov_action: F, xi: &DVector<f64>, k: usize) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if xi.len() != mean.len() {
        return Err(Error::dimension("xi", mean.len(), xi.len()));
    }
    Ok(mean + lanczos_sqrt_mv(cov_action, xi, k)?)
}

/// Gaussian conditioning with the intermediates kept for reverse mode.
pub(crate) struct Conditioning {
    pub(crate) bundle: CovarianceBundle,
    /// `S^-1 (y - mu_obs)`
    alpha: DVector<f64>,
    /// `S^-1 K_yz`, `n_obs x N`. Only kept when the covariance is.
    w: Option<DMatrix<f64>>,
    pub(crate) mean: DVector<f64>,
    pub(crate) cov: Option<DMatrix<f64>>,
}

impl Conditioning {
    pub(crate) fn new(e: &Encounter, grid: &GridSpec, params: &MgpParams, with_cov: bool) -> Result<Self> {
        Self::from_bundle(kernel::assemble_moments(e, grid, params)?, with_cov)
    }

    pub(crate) fn from_bundle(bundle: CovarianceBundle, with_cov: bool) -> Result<Self> {
        let n = bundle.n_obs();
        if n == 0 {
            return Ok(Conditioning {
                alpha: DVector::zeros(0),
                w: with_cov.then(|| DMatrix::zeros(0, bundle.grid_points.len())),
                mean: bundle.mu_grid.clone(),
                cov: with_cov.then(|| bundle.k_grid.clone()),
                bundle,
            });
        }
        let chol = {
            let mut s = bundle.sigma_obs.clone();
            for i in 0..n {
                s[(i, i)] += OBS_JITTER;
            }
            s.cholesky().ok_or_else(|| {
                let eig = SymmetricEigen::new(bundle.sigma_obs.clone()).eigenvalues;
                Error::Numerical(format!(
                    "observation covariance not positive definite (min eigenvalue {:.3e})",
                    eig.min()
                ))
            })?
        };
        let resid = &bundle.y - &bundle.mu_obs;
        let alpha = chol.solve(&resid);
        let mean = &bundle.mu_grid + &bundle.k_cross * &alpha;
        let (w, cov) = if with_cov {
            let w = chol.solve(&bundle.k_cross.transpose());
            let mut cov = &bundle.k_grid - &bundle.k_cross * &w;
            cov = (&cov + cov.transpose()) * 0.5;
            (Some(w), Some(cov))
        } else {
            (None, None)
        };
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite posterior mean".into()));
        }
        Ok(Conditioning {
            bundle,
            alpha,
            w,
            mean,
            cov,
        })
    }

    /// Pushes adjoints of the posterior mean and covariance onto the
    /// hyperparameters, accumulating into `grad`.
    pub(crate) fn backward(
        &self,
        params: &MgpParams,
        med_events: &[crate::cohort::MedEvent],
        mean_bar: &DVector<f64>,
        cov_bar: &DMatrix<f64>,
        grad: &mut MgpParams,
    ) {
        let b = &self.bundle;
        let w = self.w.as_ref().expect("backward requires the covariance pass");
        let kernel = MixtureKernel::new(params);
        let q = params.n_components();
        let m = params.n_series();
        let mut coreg_bar = vec![DMatrix::zeros(m, m); q];
        let mut log_len_bar = vec![0.0; q];

        // K_zz
        kernel.backprop(&b.grid_points, &b.grid_points, cov_bar, &mut coreg_bar, &mut log_len_bar);

        let n = b.n_obs();
        if n > 0 {
            // K_zy: from the covariance (-2 Cbar W^T) and the mean (mbar alpha^T)
            let k_cross_bar = cov_bar * w.transpose() * -2.0 + mean_bar * self.alpha.transpose();
            kernel.backprop(&b.grid_points, &b.obs_points, &k_cross_bar, &mut coreg_bar, &mut log_len_bar);

            // S: W Cbar W^T - sym(beta alpha^T) with beta = W mbar
            let beta = w * mean_bar;
            let ba = &beta * self.alpha.transpose();
            let sigma_bar = w * cov_bar * w.transpose() - (&ba + ba.transpose()) * 0.5;
            kernel.backprop(&b.obs_points, &b.obs_points, &sigma_bar, &mut coreg_bar, &mut log_len_bar);
            for (a, pt) in b.obs_points.iter().enumerate() {
                grad.log_noise[pt.series] += sigma_bar[(a, a)] * 2.0 * params.noise_var(pt.series);
            }
            let mu_obs_bar: Vec<f64> = beta.iter().map(|x| -x).collect();
            kernel::backprop_mean(&b.obs_points, &mu_obs_bar, med_events, params, grad);
        }
        kernel::backprop_mean(&b.grid_points, mean_bar.as_slice(), med_events, params, grad);

        for (g, v) in grad.log_lengthscale.iter_mut().zip(&log_len_bar) {
            *g += v;
        }
        kernel::coreg_bar_to_factor(params, &coreg_bar, grad);
    }
}

/// Adjoint of `Sigma` given the adjoint of its lower Cholesky factor `l`
/// (only the lower triangle of `l_bar` is read). Returns the symmetric form.
pub(crate) fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * l_bar.lower_triangle();
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // L^-T P L^-1
    let x = l.tr_solve_lower_triangular(&p).expect("non-singular factor");
    let a = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("non-singular factor")
        .transpose();
    (&a + a.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Label, Observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn encounter(obs: &[(usize, f64, f64)]) -> Encounter {
        Encounter {
            id: "p".into(),
            los: 50.0,
            label: Label::Control,
            event_time: None,
            prediction_time: None,
            baseline: vec![],
            observations: obs.iter().map(|&(series, time, value)| Observation { series, time, value }).collect(),
            med_events: vec![],
        }
    }

    fn single_series(len: f64, scale: f64, noise_sd: f64) -> MgpParams {
        let mut p = MgpParams::zeros(1, 0, 1, 1);
        p.log_lengthscale[0] = len.ln();
        p.coreg_factor[0] = scale;
        p.log_noise[0] = noise_sd.ln();
        p
    }

    #[test]
    fn interpolates_in_the_noise_free_limit() {
        let params = single_series(2.0, 1.0, 1e-4);
        let e = encounter(&[(0, 1.0, 0.8), (0, 3.0, -0.3)]);
        let post = compute_posterior(&e, &GridSpec::new(4).unwrap(), &params).unwrap();
        assert!((post.mean[1] - 0.8).abs() < 1e-4);
        assert!((post.mean[3] + 0.3).abs() < 1e-4);
    }

    #[test]
    fn textbook_two_point_conditioning() {
        let (l, s2, noise) = (1.5f64, 0.7f64, 0.09f64);
        let params = single_series(l, s2.sqrt(), noise.sqrt());
        let obs = [(0, 0.4, 1.2), (0, 1.7, -0.5)];
        let e = encounter(&obs);
        let post = compute_posterior(&e, &GridSpec::new(3).unwrap(), &params).unwrap();
        // dense: 2x2 explicit inverse
        let k = |a: f64, b: f64| s2 * (-(a - b).abs() / l).exp();
        let s11 = k(0.4, 0.4) + noise + OBS_JITTER;
        let s22 = k(1.7, 1.7) + noise + OBS_JITTER;
        let s12 = k(0.4, 1.7);
        let det = s11 * s22 - s12 * s12;
        let inv = [[s22 / det, -s12 / det], [-s12 / det, s11 / det]];
        let y = [1.2, -0.5];
        for i in 0..3 {
            let kx = [k(i as f64, 0.4), k(i as f64, 1.7)];
            let mean: f64 = (0..2).map(|a| (0..2).map(|b| kx[a] * inv[a][b] * y[b]).sum::<f64>()).sum();
            assert!((post.mean[i] - mean).abs() < 1e-10);
            for j in 0..3 {
                let kz = [k(j as f64, 0.4), k(j as f64, 1.7)];
                let red: f64 = (0..2).map(|a| (0..2).map(|b| kx[a] * inv[a][b] * kz[b]).sum::<f64>()).sum();
                assert!((post.cov[(i, j)] - (k(i as f64, j as f64) - red)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conditioning_reduces_variance() {
        let params = single_series(3.0, 1.0, 0.3);
        let e = encounter(&[(0, 2.2, 0.0)]);
        let grid = GridSpec::new(6).unwrap();
        let post = compute_posterior(&e, &grid, &params).unwrap();
        let prior = prior_gaussian(&e, &grid, &params).unwrap();
        for i in 0..6 {
            assert!(post.cov[(i, i)] <= prior.cov[(i, i)] + 1e-10);
        }
    }

    #[test]
    fn exact_draws() {
        let params = single_series(2.0, 1.0, 0.5);
        let e = encounter(&[(0, 1.0, 0.3)]);
        let post = compute_posterior(&e, &GridSpec::new(3).unwrap(), &params).unwrap();
        let zero = DVector::zeros(3);
        assert_eq!(draw_exact(&post, &zero).unwrap(), post.mean);
        let xi = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let a = draw_exact(&post, &xi).unwrap();
        let b = draw_exact(&post, &xi).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(draw_exact(&post, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn identity_covariance_draws() {
        let post = PosteriorGaussian {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
            factor: None,
        }
        .with_factor()
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let xi = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = draw_exact(&post, &xi).unwrap();
            acc += &z * z.transpose();
        }
        acc /= n as f64;
        let err = (acc - DMatrix::identity(3, 3)).abs().max();
        assert!(err < 0.05, "max entry error {err}");
    }

    #[test]
    fn cholesky_failure_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match cholesky_jittered(&a, 0.0) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("condition")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4;
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(n, n);
        let weights = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).lower_triangle();
        let f = |a: &DMatrix<f64>| -> f64 { a.clone().cholesky().unwrap().l().component_mul(&weights).sum() };
        let l = a.clone().cholesky().unwrap().l();
        let grad = cholesky_backward(&l, &weights);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                if i != j {
                    ap[(j, i)] += h;
                    am[(j, i)] -= h;
                }
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                let an = if i == j { grad[(i, i)] } else { 2.0 * grad[(i, j)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}) fd {fd} analytic {an}");
            }
        }
    }
}
