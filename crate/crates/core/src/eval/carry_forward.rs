//! Carry-forward featurization for the raw-value baseline classifier.

use crate::cohort::{Dims, Encounter};
use crate::kernel::GridSpec;
use crate::rnn::{bin_of, FrameTemplate, InputFrame};

/// Per-series values on the grid: the mean of observations falling in each
/// hourly bin, else the last known value, else `fill_values[m]`.
pub fn carry_forward_values(e: &Encounter, grid: &GridSpec, n_series: usize, fill_values: &[f64]) -> Vec<f64> {
    let x = grid.n_points;
    let mut sums = vec![0.0; x * n_series];
    let mut counts = vec![0usize; x * n_series];
    for o in &e.observations {
        let j = bin_of(o.time);
        if j < x {
            sums[j * n_series + o.series] += o.value;
            counts[j * n_series + o.series] += 1;
        }
    }
    let mut current: Vec<f64> = fill_values.to_vec();
    let mut out = vec![0.0; x * n_series];
    for j in 0..x {
        for m in 0..n_series {
            let k = j * n_series + m;
            if counts[k] > 0 {
                current[m] = sums[k] / counts[k] as f64;
            }
            out[k] = current[m];
        }
    }
    out
}

pub fn carry_forward_featurize(e: &Encounter, grid: &GridSpec, dims: &Dims, fill_values: &[f64]) -> Vec<InputFrame> {
    let z = carry_forward_values(e, grid, dims.m, fill_values);
    FrameTemplate::new(e, grid, dims).frames(&z)
}

pub(crate) fn carry_forward_inputs(e: &Encounter, grid: &GridSpec, dims: &Dims, fill_values: &[f64]) -> Vec<Vec<f64>> {
    let z = carry_forward_values(e, grid, dims.m, fill_values);
    FrameTemplate::new(e, grid, dims).inputs(&z)
}
