//! Two-layer LSTM sequence classifier with a target-replication loss.

use rand::Rng;

use crate::cohort::{Dims, Encounter};
use crate::error::{Error, Result};
use crate::kernel::{grid_index, GridSpec};

pub const DEFAULT_HIDDEN: usize = 64;
pub const N_LAYERS: usize = 2;

/// Grid points from `pre_hours` before to `post_hours` after the anchor are
/// labelled with the encounter outcome.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReplicationWindow {
    pub pre_hours: f64,
    pub post_hours: f64,
}

impl Default for ReplicationWindow {
    fn default() -> Self {
        ReplicationWindow {
            pre_hours: 2.0,
            post_hours: 6.0,
        }
    }
}

/// Classifier input at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFrame {
    pub z_slice: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Administrations per drug in the bin ending at this grid time.
    pub med_counts: Vec<u32>,
    /// 1 where the series was observed in the bin ending at this grid time.
    pub miss_ind: Vec<u8>,
}

impl InputFrame {
    pub fn width(&self) -> usize {
        self.z_slice.len() + self.baseline.len() + self.med_counts.len() + self.miss_ind.len()
    }

    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.extend_from_slice(&self.z_slice);
        v.extend_from_slice(&self.baseline);
        v.extend(self.med_counts.iter().map(|&c| c as f64));
        v.extend(self.miss_ind.iter().map(|&c| c as f64));
        v
    }
}

/// Grid bin holding an event at time `t`: exactly-at-admission events go to
/// frame 0, otherwise `t` in `(j - 1, j]` goes to frame `j`.
pub fn bin_of(t: f64) -> usize {
    if t <= 0.0 {
        0
    } else {
        t.ceil() as usize
    }
}

/// Everything in a frame sequence that does not depend on the latent draw.
#[derive(Debug, Clone)]
pub(crate) struct FrameTemplate {
    pub(crate) n_series: usize,
    baseline: Vec<f64>,
    med_counts: Vec<Vec<u32>>,
    miss_ind: Vec<Vec<u8>>,
}

impl FrameTemplate {
    pub(crate) fn new(e: &Encounter, grid: &GridSpec, dims: &Dims) -> Self {
        let x = grid.n_points;
        let mut med_counts = vec![vec![0u32; dims.p]; x];
        let mut miss_ind = vec![vec![0u8; dims.m]; x];
        for med in &e.med_events {
            let j = bin_of(med.time);
            if j < x {
                med_counts[j][med.drug] += 1;
            }
        }
        for o in &e.observations {
            let j = bin_of(o.time);
            if j < x {
                miss_ind[j][o.series] = 1;
            }
        }
        FrameTemplate {
            n_series: dims.m,
            baseline: e.baseline.clone(),
            med_counts,
            miss_ind,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.med_counts.len()
    }

    /// Input rows with `z` (grid-major) in the latent slots.
    pub(crate) fn inputs(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let m = self.n_series;
        (0..self.len())
            .map(|j| {
                let mut v = Vec::with_capacity(2 * m + self.baseline.len() + self.med_counts[j].len());
                v.extend_from_slice(&z[j * m..(j + 1) * m]);
                v.extend_from_slice(&self.baseline);
                v.extend(self.med_counts[j].iter().map(|&c| c as f64));
                v.extend(self.miss_ind[j].iter().map(|&c| c as f64));
                v
            })
            .collect()
    }

    pub(crate) fn frames(&self, z: &[f64]) -> Vec<InputFrame> {
        let m = self.n_series;
        (0..self.len())
            .map(|j| InputFrame {
                z_slice: (0..m).map(|s| z[grid_index(j, s, m)]).collect(),
                baseline: self.baseline.clone(),
                med_counts: self.med_counts[j].clone(),
                miss_ind: self.miss_ind[j].clone(),
            })
            .collect()
    }
}

/// Builds one frame per grid point from a latent vector laid out grid-major.
pub fn assemble_frames(e: &Encounter, grid: &GridSpec, dims: &Dims, z: &[f64]) -> Result<Vec<InputFrame>> {
    if z.len() != grid.latent_len(dims.m) {
        return Err(Error::dimension("latent vector", grid.latent_len(dims.m), z.len()));
    }
    Ok(FrameTemplate::new(e, grid, dims).frames(z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    /// `[4H][input]`, gate blocks ordered input, forget, cell, output.
    pub w_in: Vec<f64>,
    /// `[4H][H]`
    pub w_rec: Vec<f64>,
    /// `[4H]`
    pub bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            input,
            hidden,
            w_in: vec![0.0; 4 * hidden * input],
            w_rec: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub layers: Vec<LstmLayer>,
    /// `[H]`
    pub out_w: Vec<f64>,
    /// `[1]`
    pub out_b: Vec<f64>,
}

impl RnnParams {
    pub fn zeros(input_width: usize, hidden: usize) -> Self {
        RnnParams {
            layers: vec![LstmLayer::zeros(input_width, hidden), LstmLayer::zeros(hidden, hidden)],
            out_w: vec![0.0; hidden],
            out_b: vec![0.0],
        }
    }

    pub fn zeros_like(&self) -> Self {
        RnnParams::zeros(self.input_width(), self.hidden())
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, forget-gate bias 1.
    pub fn initialize<R: Rng + ?Sized>(input_width: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = RnnParams::zeros(input_width, hidden);
        for layer in &mut p.layers {
            let bound = 1.0 / ((layer.input + layer.hidden) as f64).sqrt();
            for w in layer.w_in.iter_mut().chain(layer.w_rec.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias[hidden..2 * hidden] {
                *b = 1.0;
            }
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        for w in &mut p.out_w {
            *w = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        const NAMES: [[&str; 3]; 2] = [
            ["rnn.l1.w_in", "rnn.l1.w_rec", "rnn.l1.bias"],
            ["rnn.l2.w_in", "rnn.l2.w_rec", "rnn.l2.bias"],
        ];
        let mut out: Vec<(&'static str, &[f64])> = Vec::with_capacity(8);
        for (layer, names) in self.layers.iter().zip(NAMES) {
            out.push((names[0], &layer.w_in));
            out.push((names[1], &layer.w_rec));
            out.push((names[2], &layer.bias));
        }
        out.push(("rnn.out.w", &self.out_w));
        out.push(("rnn.out.b", &self.out_b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        const NAMES: [[&str; 3]; 2] = [
            ["rnn.l1.w_in", "rnn.l1.w_rec", "rnn.l1.bias"],
            ["rnn.l2.w_in", "rnn.l2.w_rec", "rnn.l2.bias"],
        ];
        let mut out: Vec<(&'static str, &mut Vec<f64>)> = Vec::with_capacity(8);
        for (layer, names) in self.layers.iter_mut().zip(NAMES) {
            out.push((names[0], &mut layer.w_in));
            out.push((names[1], &mut layer.w_rec));
            out.push((names[2], &mut layer.bias));
        }
        out.push(("rnn.out.w", &mut self.out_w));
        out.push(("rnn.out.b", &mut self.out_b));
        out
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        self.layers.iter().map(|l| sq(&l.w_in) + sq(&l.w_rec)).sum::<f64>() + sq(&self.out_w)
    }

    /// Adds `scale * d/dw ||w||^2` for the weight blocks.
    pub(crate) fn add_l2_grad(&self, grad: &mut RnnParams, lambda: f64) {
        let add = |g: &mut [f64], w: &[f64]| {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += 2.0 * lambda * wi;
            }
        };
        for (gl, l) in grad.layers.iter_mut().zip(&self.layers) {
            add(&mut gl.w_in, &l.w_in);
            add(&mut gl.w_rec, &l.w_rec);
        }
        add(&mut grad.out_w, &self.out_w);
    }

    pub(crate) fn add_assign(&mut self, other: &RnnParams, scale: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != N_LAYERS {
            return Err(Error::dimension("rnn layers", N_LAYERS, self.layers.len()));
        }
        let h = self.hidden();
        let expect = [
            (self.layers[0].w_in.len(), 4 * h * self.input_width(), "rnn.l1.w_in"),
            (self.layers[0].w_rec.len(), 4 * h * h, "rnn.l1.w_rec"),
            (self.layers[0].bias.len(), 4 * h, "rnn.l1.bias"),
            (self.layers[1].input, h, "rnn.l2 input width"),
            (self.layers[1].hidden, h, "rnn.l2 hidden width"),
            (self.layers[1].w_in.len(), 4 * h * h, "rnn.l2.w_in"),
            (self.layers[1].w_rec.len(), 4 * h * h, "rnn.l2.w_rec"),
            (self.layers[1].bias.len(), 4 * h, "rnn.l2.bias"),
            (self.out_w.len(), h, "rnn.out.w"),
            (self.out_b.len(), 1, "rnn.out.b"),
        ];
        for (found, expected, what) in expect {
            if found != expected {
                return Err(Error::dimension(what, expected, found));
            }
        }
        if self.blocks().iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("non-finite classifier weight".into()));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct LayerTrace {
    /// per step: activated gates `[i, f, g, o]`, length 4H
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
}

pub(crate) struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
    pub(crate) logits: Vec<f64>,
}

fn layer_forward(layer: &LstmLayer, inputs: &[Vec<f64>]) -> LayerTrace {
    let h = layer.hidden;
    let n_in = layer.input;
    let mut trace = LayerTrace {
        gates: Vec::with_capacity(inputs.len()),
        cells: Vec::with_capacity(inputs.len()),
        hiddens: Vec::with_capacity(inputs.len()),
        tanh_cells: Vec::with_capacity(inputs.len()),
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for x in inputs {
        let mut a = layer.bias.clone();
        for (r, ar) in a.iter_mut().enumerate() {
            let wi = &layer.w_in[r * n_in..(r + 1) * n_in];
            let wr = &layer.w_rec[r * h..(r + 1) * h];
            *ar += wi.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + wr.iter().zip(&h_prev).map(|(w, v)| w * v).sum::<f64>();
        }
        for (r, ar) in a.iter_mut().enumerate() {
            *ar = if (2 * h..3 * h).contains(&r) { ar.tanh() } else { sigmoid(*ar) };
        }
        let mut c = vec![0.0; h];
        let mut hv = vec![0.0; h];
        let mut tc = vec![0.0; h];
        for k in 0..h {
            c[k] = a[h + k] * c_prev[k] + a[k] * a[2 * h + k];
            tc[k] = c[k].tanh();
            hv[k] = a[3 * h + k] * tc[k];
        }
        trace.gates.push(a);
        h_prev.clone_from(&hv);
        c_prev.clone_from(&c);
        trace.cells.push(c);
        trace.hiddens.push(hv);
        trace.tanh_cells.push(tc);
    }
    trace
}

/// Backpropagates hidden-state adjoints through one layer; returns input adjoints.
fn layer_backward(layer: &LstmLayer, inputs: &[Vec<f64>], trace: &LayerTrace, dh_out: &[Vec<f64>], grad: &mut LstmLayer) -> Vec<Vec<f64>> {
    let h = layer.hidden;
    let n_in = layer.input;
    let steps = inputs.len();
    let mut dx = vec![vec![0.0; n_in]; steps];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for t in (0..steps).rev() {
        let g = &trace.gates[t];
        let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zeros };
        let h_prev = if t > 0 { &trace.hiddens[t - 1] } else { &zeros };
        let tc = &trace.tanh_cells[t];
        for k in 0..h {
            let dh = dh_out[t][k] + dh_next[k];
            let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let d_o = dh * tc[k];
            let dc = dc_next[k] + dh * o * (1.0 - tc[k] * tc[k]);
            let di = dc * gg;
            let dg = dc * i;
            let df = dc * c_prev[k];
            dc_next[k] = dc * f;
            da[k] = di * i * (1.0 - i);
            da[h + k] = df * f * (1.0 - f);
            da[2 * h + k] = dg * (1.0 - gg * gg);
            da[3 * h + k] = d_o * o * (1.0 - o);
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let x = &inputs[t];
        for (r, &dar) in da.iter().enumerate() {
            if dar == 0.0 {
                continue;
            }
            grad.bias[r] += dar;
            let wi = &layer.w_in[r * n_in..(r + 1) * n_in];
            let gwi = &mut grad.w_in[r * n_in..(r + 1) * n_in];
            for k in 0..n_in {
                gwi[k] += dar * x[k];
                dx[t][k] += dar * wi[k];
            }
            let wr = &layer.w_rec[r * h..(r + 1) * h];
            let gwr = &mut grad.w_rec[r * h..(r + 1) * h];
            for k in 0..h {
                gwr[k] += dar * h_prev[k];
                dh_next[k] += dar * wr[k];
            }
        }
    }
    dx
}

pub(crate) fn forward_cached(params: &RnnParams, inputs: Vec<Vec<f64>>) -> ForwardCache {
    let l1 = layer_forward(&params.layers[0], &inputs);
    let l2 = layer_forward(&params.layers[1], &l1.hiddens);
    let logits = l2
        .hiddens
        .iter()
        .map(|hv| params.out_b[0] + hv.iter().zip(&params.out_w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    ForwardCache {
        inputs,
        layers: vec![l1, l2],
        logits,
    }
}

/// Adjoints of all weights and of the inputs given per-step logit adjoints.
pub(crate) fn backward(params: &RnnParams, cache: &ForwardCache, dlogits: &[f64], grad: &mut RnnParams) -> Vec<Vec<f64>> {
    let l2 = &cache.layers[1];
    let dh2: Vec<Vec<f64>> = dlogits.iter().map(|&d| params.out_w.iter().map(|w| d * w).collect()).collect();
    for (t, &d) in dlogits.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad.out_b[0] += d;
        for (g, hv) in grad.out_w.iter_mut().zip(&l2.hiddens[t]) {
            *g += d * hv;
        }
    }
    let (g1, g2) = grad.layers.split_at_mut(1);
    let dh1 = layer_backward(&params.layers[1], &cache.layers[0].hiddens, l2, &dh2, &mut g2[0]);
    layer_backward(&params.layers[0], &cache.inputs, &cache.layers[0], &dh1, &mut g1[0])
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if let Some(step) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite classifier output at step {step}")));
    }
    Ok(())
}

pub(crate) fn forward_logits(params: &RnnParams, inputs: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    if let Some(bad) = inputs.iter().find(|x| x.len() != params.input_width()) {
        return Err(Error::dimension("input frame", params.input_width(), bad.len()));
    }
    let logits = forward_cached(params, inputs).logits;
    check_logits(&logits)?;
    Ok(logits)
}

/// Per-step outcome probabilities; zero initial hidden and cell states.
pub fn lstm_forward(params: &RnnParams, frames: &[InputFrame]) -> Result<Vec<f64>> {
    let logits = forward_logits(params, frames.iter().map(InputFrame::to_input).collect())?;
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// Grid steps labelled by target replication around `anchor`.
pub fn target_steps(anchor: f64, n_points: usize, window: &ReplicationWindow) -> Result<Vec<usize>> {
    let lo = (anchor - window.pre_hours).ceil().max(0.0);
    let hi = (anchor + window.post_hours).floor();
    if !anchor.is_finite() || hi < lo || lo >= n_points as f64 {
        return Err(Error::Data(format!("no grid points within the replication window around {anchor}")));
    }
    let hi = (hi as usize).min(n_points - 1);
    Ok((lo as usize..=hi).collect())
}

/// Mean binary cross-entropy over the replication window plus the L2
/// penalty on classifier weights.
pub fn replicated_loss(probs: &[f64], e: &Encounter, window: &ReplicationWindow, l2_lambda: f64, params: &RnnParams) -> Result<f64> {
    let anchor = e
        .anchor()
        .ok_or_else(|| Error::Data(format!("encounter {} has no anchor time", e.id)))?;
    let steps = target_steps(anchor, probs.len(), window)?;
    let o = e.label.target();
    let data: f64 = steps
        .iter()
        .map(|&j| {
            let p = probs[j];
            if o == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / steps.len() as f64;
    Ok(data + l2_lambda * params.weight_sq_norm())
}

/// Data term of the replicated loss from logits, with logit adjoints.
pub(crate) fn replicated_loss_logits(logits: &[f64], steps: &[usize], target: f64) -> (f64, Vec<f64>) {
    let n = steps.len() as f64;
    let mut dl = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for &j in steps {
        let x = logits[j];
        loss += softplus(x) - target * x;
        dl[j] = (sigmoid(x) - target) / n;
    }
    (loss / n, dl)
}
