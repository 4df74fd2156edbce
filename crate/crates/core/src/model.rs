//! A trained classifier: an imputer that maps irregular data onto the grid
//! plus the recurrent network that reads the gridded frames.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Dims, Encounter};
use crate::error::{Error, Result};
use crate::eval::carry_forward::carry_forward_inputs;
use crate::kernel::{GridSpec, MgpParams};
use crate::posterior::{cholesky_jittered, posterior_mean, Conditioning, DRAW_JITTER};
use crate::rnn::{forward_logits, FrameTemplate, RnnParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Latent values from the multi-output GP posterior.
    MgpRnn,
    /// Hourly bin means with last-value carry-forward.
    RawRnn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Imputer {
    Mgp(MgpParams),
    CarryForward { fill_values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub imputer: Imputer,
    pub rnn: RnnParams,
}

/// Adjoints for every trainable block of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub mgp: Option<MgpParams>,
    pub rnn: RnnParams,
}

impl ModelGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(m) = &self.mgp {
            for (_, b) in m.blocks() {
                out.extend_from_slice(b);
            }
        }
        for (_, b) in self.rnn.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub(crate) fn add_assign(&mut self, other: &ModelGrad, scale: f64) {
        if let (Some(a), Some(b)) = (&mut self.mgp, &other.mgp) {
            a.add_assign(b, scale);
        }
        self.rnn.add_assign(&other.rnn, scale);
    }

    /// Name of the first block holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let mgp_blocks = self.mgp.as_ref().map(|m| m.blocks().to_vec()).unwrap_or_default();
        mgp_blocks
            .into_iter()
            .chain(self.rnn.blocks())
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self.imputer {
            Imputer::Mgp(_) => ModelKind::MgpRnn,
            Imputer::CarryForward { .. } => ModelKind::RawRnn,
        }
    }

    pub fn mgp(&self) -> Option<&MgpParams> {
        match &self.imputer {
            Imputer::Mgp(p) => Some(p),
            Imputer::CarryForward { .. } => None,
        }
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            mgp: self.mgp().map(MgpParams::zeros_like),
            rnn: self.rnn.zeros_like(),
        }
    }

    /// Trainable parameters concatenated in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(m) = self.mgp() {
            for (_, b) in m.blocks() {
                out.extend_from_slice(b);
            }
        }
        for (_, b) in self.rnn.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if flat.len() != expected {
            return Err(Error::dimension("flat parameters", expected, flat.len()));
        }
        let mut offset = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        };
        if let Imputer::Mgp(m) = &mut self.imputer {
            for (_, b) in m.blocks_mut() {
                take(b);
            }
        }
        for (_, b) in self.rnn.blocks_mut() {
            take(b);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.rnn.validate()?;
        if self.rnn.input_width() != self.dims.frame_width() {
            return Err(Error::dimension("classifier input width", self.dims.frame_width(), self.rnn.input_width()));
        }
        match &self.imputer {
            Imputer::Mgp(p) => {
                p.validate()?;
                if p.n_series() != self.dims.m {
                    return Err(Error::dimension("mgp series count", self.dims.m, p.n_series()));
                }
                if p.n_drugs() != self.dims.p {
                    return Err(Error::dimension("mgp drug count", self.dims.p, p.n_drugs()));
                }
            }
            Imputer::CarryForward { fill_values } => {
                if fill_values.len() != self.dims.m {
                    return Err(Error::dimension("fill values", self.dims.m, fill_values.len()));
                }
            }
        }
        Ok(())
    }

    /// Classifier input rows for the imputer's point estimate (posterior
    /// mean, or carried-forward values).
    pub fn point_inputs(&self, e: &Encounter, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
        match &self.imputer {
            Imputer::Mgp(params) => {
                let mean = posterior_mean(e, grid, params)?;
                Ok(FrameTemplate::new(e, grid, &self.dims).inputs(mean.as_slice()))
            }
            Imputer::CarryForward { fill_values } => Ok(carry_forward_inputs(e, grid, &self.dims, fill_values)),
        }
    }

    /// Probability at the last grid point using data up to `horizon`.
    pub fn final_probability(&self, e: &Encounter, horizon: f64) -> Result<f64> {
        let truncated = e.truncate(horizon);
        let grid = GridSpec::for_horizon(horizon);
        let logits = forward_logits(&self.rnn, self.point_inputs(&truncated, &grid)?)?;
        Ok(sigmoid(*logits.last().expect("grid has at least one point")))
    }

    /// Like [`final_probability`](Self::final_probability) but averaged over
    /// `samples` exact posterior draws seeded from `seed` and the encounter id.
    pub fn final_probability_mc(&self, e: &Encounter, horizon: f64, samples: usize, seed: u64) -> Result<f64> {
        let params = match &self.imputer {
            Imputer::Mgp(p) => p,
            Imputer::CarryForward { .. } => return self.final_probability(e, horizon),
        };
        let truncated = e.truncate(horizon);
        let grid = GridSpec::for_horizon(horizon);
        let cond = Conditioning::new(&truncated, &grid, params, true)?;
        let cov = cond.cov.as_ref().expect("requested covariance");
        let r = cholesky_jittered(cov, DRAW_JITTER)?;
        let template = FrameTemplate::new(&truncated, &grid, &self.dims);
        let mut rng = encounter_rng(seed, &e.id);
        let mut total = 0.0;
        for _ in 0..samples.max(1) {
            let xi = standard_normal(cond.mean.len(), &mut rng);
            let z = &cond.mean + &r * xi;
            let logits = forward_logits(&self.rnn, template.inputs(z.as_slice()))?;
            total += sigmoid(*logits.last().expect("non-empty grid"));
        }
        Ok(total / samples.max(1) as f64)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 64-bit FNV-1a of a string; stable across platforms and releases.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream per encounter so results do not depend on batch order
/// or scheduling.
pub(crate) fn encounter_rng(base: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base ^ stable_hash(id).rotate_left(17))
}

pub(crate) fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}
