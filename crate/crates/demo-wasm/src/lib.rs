//! Browser bindings for three small views of the model: a single-series GP
//! posterior band, a medication response curve, and Lanczos convergence.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mgp_rnn::cohort::{Dims, Encounter, Label, MedEvent, Observation};
use mgp_rnn::kernel::{medication_mean, GridSpec, MgpParams};
use mgp_rnn::lanczos::lanczos_sqrt_mv;
use mgp_rnn::posterior::compute_posterior;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Posterior mean followed by posterior sd on the hourly grid `0..=horizon`
/// for one series with an OU kernel.
pub fn posterior_band(times: &[f64], values: &[f64], lengthscale: f64, signal_sd: f64, noise_sd: f64, horizon: f64) -> mgp_rnn::Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(mgp_rnn::Error::Config(format!("{} times but {} values", times.len(), values.len())));
    }
    if !(lengthscale > 0.0 && signal_sd > 0.0 && noise_sd > 0.0 && horizon >= 0.0) {
        return Err(mgp_rnn::Error::Config("lengthscale, sds must be positive and horizon non-negative".into()));
    }
    let mut params = MgpParams::zeros(1, 0, 1, 1);
    params.log_lengthscale[0] = lengthscale.ln();
    params.coreg_factor[0] = signal_sd;
    params.log_noise[0] = noise_sd.ln();
    let encounter = Encounter {
        id: "demo".into(),
        los: horizon,
        label: Label::Control,
        event_time: None,
        prediction_time: None,
        baseline: vec![],
        observations: times
            .iter()
            .zip(values)
            .filter(|(t, _)| **t >= 0.0 && **t <= horizon)
            .map(|(&time, &value)| Observation { series: 0, time, value })
            .collect(),
        med_events: vec![],
    };
    encounter.validate(&Dims::new(1, 0, 0))?;
    let grid = GridSpec::for_horizon(horizon);
    let post = if encounter.observations.is_empty() {
        mgp_rnn::posterior::prior_gaussian(&encounter, &grid, &params)?
    } else {
        compute_posterior(&encounter, &grid, &params)?
    };
    let mut out: Vec<f64> = post.mean.iter().copied().collect();
    out.extend((0..post.dim()).map(|i| post.cov[(i, i)].max(0.0).sqrt()));
    Ok(out)
}

/// Medication contribution to the mean at `n` evenly spaced times over
/// `[0, horizon]` for doses at `dose_times`, with one response term per
/// `(alpha, beta)` pair.
pub fn response_curve(dose_times: &[f64], alphas: &[f64], betas: &[f64], horizon: f64, n: usize) -> mgp_rnn::Result<Vec<f64>> {
    if alphas.len() != betas.len() || alphas.is_empty() {
        return Err(mgp_rnn::Error::Config("need matching, non-empty alpha and beta lists".into()));
    }
    if betas.iter().any(|b| !(*b > 0.0)) {
        return Err(mgp_rnn::Error::Config("decay rates must be positive".into()));
    }
    let mut params = MgpParams::zeros(1, 1, 1, alphas.len());
    params.med_alpha.copy_from_slice(alphas);
    for (lb, b) in params.med_log_beta.iter_mut().zip(betas) {
        *lb = b.ln();
    }
    let meds: Vec<MedEvent> = dose_times.iter().map(|&time| MedEvent { drug: 0, time }).collect();
    let n = n.max(2);
    Ok((0..n)
        .map(|i| medication_mean(0, horizon * i as f64 / (n - 1) as f64, &meds, &params))
        .collect())
}

/// Relative error of the Lanczos square-root action against the dense
/// eigendecomposition for k = 1..=dim on a random PSD matrix with the given
/// condition number.
pub fn lanczos_errors(dim: usize, condition: f64, seed: u64) -> mgp_rnn::Result<Vec<f64>> {
    if dim == 0 || !(condition >= 1.0) {
        return Err(mgp_rnn::Error::Config("dim must be positive and condition at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |i, _| condition.powf(-(i as f64) / (dim.max(2) - 1) as f64));
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let root = &q * DMatrix::from_diagonal(&eig.map(f64::sqrt)) * q.transpose();
    let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let exact = &root * &v;
    (1..=dim)
        .map(|k| {
            let approx = lanczos_sqrt_mv(|x| &a * x, &v, k)?;
            Ok((approx - &exact).norm() / exact.norm())
        })
        .collect()
}

#[wasm_bindgen(js_name = posteriorBand)]
pub fn posterior_band_js(times: &[f64], values: &[f64], lengthscale: f64, signal_sd: f64, noise_sd: f64, horizon: f64) -> Result<Vec<f64>, JsValue> {
    posterior_band(times, values, lengthscale, signal_sd, noise_sd, horizon).map_err(js_err)
}

#[wasm_bindgen(js_name = responseCurve)]
pub fn response_curve_js(dose_times: &[f64], alphas: &[f64], betas: &[f64], horizon: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    response_curve(dose_times, alphas, betas, horizon, n).map_err(js_err)
}

#[wasm_bindgen(js_name = lanczosErrors)]
pub fn lanczos_errors_js(dim: usize, condition: f64, seed: u64) -> Result<Vec<f64>, JsValue> {
    lanczos_errors(dim, condition, seed).map_err(js_err)
}
