//! Wide-and-deep regression network.
//!
//! Deep branch: two stacked LSTM layers over the normalized sequence, a shared
//! per-timestep projection `hidden -> 1`, then `N -> 100 (sigmoid) -> 50
//! (sigmoid) -> 1 (linear)`. Wide branch: affine score over the 8 tabular
//! features (optionally squashed by a sigmoid). The model output is the sum of
//! the two branch outputs.
//!
//! All parameters live in flat `f64` buffers. The canonical parameter order
//! (used by [`Weights::slices`], the optimizer and the checkpoint format) is:
//!
//! 1. LSTM layer 1 weights, LSTM layer 1 bias, LSTM layer 2 weights, LSTM
//!    layer 2 bias
//! 2. projection weights, projection bias
//! 3. dense1 weights, dense1 bias, dense2 weights, dense2 bias
//! 4. output weights, output bias
//! 5. wide weights, wide bias
//!
//! Deep entries are absent for wide-only models and wide entries for deep-only
//! models.

mod checkpoint;
mod lstm;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use lstm::{lstm_cell_step, LstmLayerParams};

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use thiserror::Error;

use crate::rng::SplitMix64;

pub const DENSE1_WIDTH: usize = 100;
pub const DENSE2_WIDTH: usize = 50;
pub const WIDE_WIDTH: usize = 8;
pub const DEFAULT_HIDDEN_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sequence length {found} does not match the model's {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("model has no {0} branch but input was supplied, or vice versa")]
    BranchMismatch(&'static str),
    #[error("tape was recorded with different parameters")]
    StaleTape,
    #[error("tape has no recorded activations")]
    EmptyTape,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `len x width` matrix of normalized sequence features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub len: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Sequence {
    pub fn new(len: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * width {
            return Err(NetError::DimensionMismatch(format!(
                "sequence buffer {} != {len} x {width}",
                data.len()
            )));
        }
        Ok(Self { len, width, data })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepHeadParams {
    pub seq_len: usize,
    /// `[hidden]`, shared across timesteps.
    pub proj_w: Vec<f64>,
    pub proj_b: f64,
    /// Row-major `[100 x seq_len]`.
    pub dense1_w: Vec<f64>,
    pub dense1_b: Vec<f64>,
    /// Row-major `[50 x 100]`.
    pub dense2_w: Vec<f64>,
    pub dense2_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl DeepHeadParams {
    pub fn zeros(hidden_dim: usize, seq_len: usize) -> Self {
        Self {
            seq_len,
            proj_w: vec![0.0; hidden_dim],
            proj_b: 0.0,
            dense1_w: vec![0.0; DENSE1_WIDTH * seq_len],
            dense1_b: vec![0.0; DENSE1_WIDTH],
            dense2_w: vec![0.0; DENSE2_WIDTH * DENSE1_WIDTH],
            dense2_b: vec![0.0; DENSE2_WIDTH],
            out_w: vec![0.0; DENSE2_WIDTH],
            out_b: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepParams {
    pub lstm: [LstmLayerParams; 2],
    pub head: DeepHeadParams,
}

impl DeepParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, seq_len: usize) -> Self {
        Self {
            lstm: [
                LstmLayerParams::zeros(input_dim, hidden_dim),
                LstmLayerParams::zeros(hidden_dim, hidden_dim),
            ],
            head: DeepHeadParams::zeros(hidden_dim, seq_len),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lstm[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm[0].hidden_dim
    }

    pub fn seq_len(&self) -> usize {
        self.head.seq_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WideParams {
    pub weights: [f64; WIDE_WIDTH],
    pub bias: f64,
}

impl WideParams {
    pub fn zeros() -> Self {
        Self {
            weights: [0.0; WIDE_WIDTH],
            bias: 0.0,
        }
    }
}

/// Trainable parameters of either branch. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub deep: Option<DeepParams>,
    pub wide: Option<WideParams>,
}

pub type ParamGradients = Weights;

impl Weights {
    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Parameter buffers in canonical order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(d) = &self.deep {
            for l in &d.lstm {
                out.push(&l.weights);
                out.push(&l.bias);
            }
            let h = &d.head;
            out.push(&h.proj_w);
            out.push(std::slice::from_ref(&h.proj_b));
            out.push(&h.dense1_w);
            out.push(&h.dense1_b);
            out.push(&h.dense2_w);
            out.push(&h.dense2_b);
            out.push(&h.out_w);
            out.push(std::slice::from_ref(&h.out_b));
        }
        if let Some(w) = &self.wide {
            out.push(&w.weights);
            out.push(std::slice::from_ref(&w.bias));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(d) = &mut self.deep {
            for l in &mut d.lstm {
                out.push(&mut l.weights);
                out.push(&mut l.bias);
            }
            let h = &mut d.head;
            out.push(&mut h.proj_w);
            out.push(std::slice::from_mut(&mut h.proj_b));
            out.push(&mut h.dense1_w);
            out.push(&mut h.dense1_b);
            out.push(&mut h.dense2_w);
            out.push(&mut h.dense2_b);
            out.push(&mut h.out_w);
            out.push(std::slice::from_mut(&mut h.out_b));
        }
        if let Some(w) = &mut self.wide {
            out.push(&mut w.weights);
            out.push(std::slice::from_mut(&mut w.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Overwrites every parameter from a flat buffer in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(NetError::DimensionMismatch(format!(
                "flat buffer {} != {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in self.slices() {
            h.write_usize(s.len());
            for v in s {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// z-score statistics for one feature; `std` is always positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub const IDENTITY: Normalizer = Normalizer { mean: 0.0, std: 1.0 };

    /// Population statistics; a constant feature gets `std = 1`.
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in values {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let std = (m2 / n as f64).sqrt();
        Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Normalizers {
    /// One per sequence feature (empty for wide-only models).
    pub sequence: Vec<Normalizer>,
    /// Eight for models with a wide branch, otherwise empty.
    pub tabular: Vec<Normalizer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Weights,
    pub normalizers: Normalizers,
    /// Squash the wide score with a sigmoid.
    pub wide_sigmoid: bool,
}

/// Shape of a model to be initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    /// `(input_dim, seq_len)` of the deep branch, if any.
    pub deep: Option<(usize, usize)>,
    pub hidden_dim: usize,
    pub wide: bool,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let deep = shape
            .deep
            .map(|(input, n)| DeepParams::zeros(input, shape.hidden_dim, n));
        let wide = shape.wide.then(WideParams::zeros);
        let normalizers = Normalizers {
            sequence: vec![Normalizer::IDENTITY; shape.deep.map_or(0, |d| d.0)],
            tabular: if shape.wide {
                vec![Normalizer::IDENTITY; WIDE_WIDTH]
            } else {
                Vec::new()
            },
        };
        Self {
            weights: Weights { deep, wide },
            normalizers,
            wide_sigmoid: false,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, forget-gate bias 1, other biases 0,
    /// wide branch all zero.
    pub fn init(shape: ModelShape, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(shape);
        if let Some(d) = &mut p.weights.deep {
            for l in &mut d.lstm {
                l.init(rng);
            }
            let h = &mut d.head;
            let hidden = h.proj_w.len();
            fill_uniform(&mut h.proj_w, hidden, rng);
            fill_uniform(&mut h.dense1_w, h.seq_len, rng);
            fill_uniform(&mut h.dense2_w, DENSE1_WIDTH, rng);
            fill_uniform(&mut h.out_w, DENSE2_WIDTH, rng);
        }
        p
    }

    pub fn shape(&self) -> ModelShape {
        let d = self.weights.deep.as_ref();
        ModelShape {
            deep: d.map(|d| (d.input_dim(), d.seq_len())),
            hidden_dim: d.map_or(0, DeepParams::hidden_dim),
            wide: self.weights.wide.is_some(),
        }
    }

    /// Applies the stored normalizers to raw inputs.
    pub fn normalize(
        &self,
        seq: Option<&Sequence>,
        tab: Option<&[f64; WIDE_WIDTH]>,
    ) -> Result<(Option<Sequence>, Option<[f64; WIDE_WIDTH]>)> {
        let seq = match seq {
            Some(s) => {
                if s.width != self.normalizers.sequence.len() {
                    return Err(NetError::DimensionMismatch(format!(
                        "sequence width {} vs {} normalizers",
                        s.width,
                        self.normalizers.sequence.len()
                    )));
                }
                let data = s
                    .data
                    .chunks(s.width)
                    .flat_map(|row| row.iter().zip(&self.normalizers.sequence).map(|(x, n)| n.apply(*x)))
                    .collect();
                Some(Sequence::new(s.len, s.width, data)?)
            }
            None => None,
        };
        let tab = match tab {
            Some(t) => {
                if self.normalizers.tabular.len() != WIDE_WIDTH {
                    return Err(NetError::BranchMismatch("wide"));
                }
                let mut out = [0.0; WIDE_WIDTH];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = self.normalizers.tabular[k].apply(t[k]);
                }
                Some(out)
            }
            None => None,
        };
        Ok((seq, tab))
    }

    /// Normalizes raw inputs and runs [`model_forward`].
    pub fn predict(&self, seq: Option<&Sequence>, tab: Option<&[f64; WIDE_WIDTH]>) -> Result<f64> {
        let (s, t) = self.normalize(seq, tab)?;
        model_forward(self, s.as_ref(), t.as_ref())
    }
}

fn fill_uniform(buf: &mut [f64], fan_in: usize, rng: &mut SplitMix64) {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in buf {
        *v = rng.uniform(-a, a);
    }
}

/// Activations of the deep branch needed for backpropagation.
#[derive(Debug, Clone)]
pub struct DeepTape {
    layers: [lstm::LayerTape; 2],
    /// Per-timestep projections, `[N]`.
    proj: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WideTape {
    x: [f64; WIDE_WIDTH],
    /// Post-activation wide output.
    out: f64,
}

#[derive(Debug, Clone)]
pub struct Tape {
    fingerprint: u64,
    wide_sigmoid: bool,
    deep: Option<DeepTape>,
    wide: Option<WideTape>,
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n_in..(r + 1) * n_in];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Deep-branch output for a normalized sequence.
pub fn deep_forward(deep: &DeepParams, seq: &Sequence, collect_tape: bool) -> Result<(f64, Option<DeepTape>)> {
    if seq.len != deep.seq_len() {
        return Err(NetError::LengthMismatch {
            expected: deep.seq_len(),
            found: seq.len,
        });
    }
    if seq.width != deep.input_dim() {
        return Err(NetError::DimensionMismatch(format!(
            "sequence width {} vs LSTM input {}",
            seq.width,
            deep.input_dim()
        )));
    }
    let l1 = lstm::layer_forward(&deep.lstm[0], &seq.data, seq.len)?;
    let l2 = lstm::layer_forward(&deep.lstm[1], &l1.hidden, seq.len)?;
    let head = &deep.head;
    let h = deep.hidden_dim();
    let proj: Vec<f64> = l2
        .hidden
        .chunks(h)
        .map(|ht| {
            let mut acc = head.proj_b;
            for (w, x) in head.proj_w.iter().zip(ht) {
                acc += w * x;
            }
            acc
        })
        .collect();
    let mut a1 = vec![0.0; DENSE1_WIDTH];
    dense_forward(&head.dense1_w, &head.dense1_b, &proj, &mut a1);
    a1.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut a2 = vec![0.0; DENSE2_WIDTH];
    dense_forward(&head.dense2_w, &head.dense2_b, &a1, &mut a2);
    a2.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut y = head.out_b;
    for (w, a) in head.out_w.iter().zip(&a2) {
        y += w * a;
    }
    let tape = collect_tape.then(|| DeepTape {
        layers: [l1, l2],
        proj,
        a1,
        a2,
    });
    Ok((y, tape))
}

/// Wide-branch output: `w . x + b`, or its sigmoid when `sigmoid` is set.
pub fn wide_forward(wide: &WideParams, feats: &[f64; WIDE_WIDTH], sigmoid_out: bool) -> f64 {
    let mut acc = wide.bias;
    for (w, x) in wide.weights.iter().zip(feats) {
        acc += w * x;
    }
    if sigmoid_out {
        sigmoid(acc)
    } else {
        acc
    }
}

fn check_branches(
    params: &ModelParams,
    seq: Option<&Sequence>,
    feats: Option<&[f64; WIDE_WIDTH]>,
) -> Result<()> {
    if params.weights.deep.is_some() != seq.is_some() {
        return Err(NetError::BranchMismatch("deep"));
    }
    if params.weights.wide.is_some() != feats.is_some() {
        return Err(NetError::BranchMismatch("wide"));
    }
    Ok(())
}

/// `deep_forward + wide_forward` on normalized inputs.
pub fn model_forward(
    params: &ModelParams,
    seq: Option<&Sequence>,
    feats: Option<&[f64; WIDE_WIDTH]>,
) -> Result<f64> {
    check_branches(params, seq, feats)?;
    let deep = match (&params.weights.deep, seq) {
        (Some(d), Some(s)) => deep_forward(d, s, false)?.0,
        _ => 0.0,
    };
    let wide = match (&params.weights.wide, feats) {
        (Some(w), Some(x)) => wide_forward(w, x, params.wide_sigmoid),
        _ => 0.0,
    };
    Ok(deep + wide)
}

/// Forward pass that also records the tape for [`model_backward`].
pub fn model_forward_tape(
    params: &ModelParams,
    seq: Option<&Sequence>,
    feats: Option<&[f64; WIDE_WIDTH]>,
) -> Result<(f64, Tape)> {
    check_branches(params, seq, feats)?;
    let (deep_y, deep_tape) = match (&params.weights.deep, seq) {
        (Some(d), Some(s)) => deep_forward(d, s, true)?,
        _ => (0.0, None),
    };
    let (wide_y, wide_tape) = match (&params.weights.wide, feats) {
        (Some(w), Some(x)) => {
            let out = wide_forward(w, x, params.wide_sigmoid);
            (out, Some(WideTape { x: *x, out }))
        }
        _ => (0.0, None),
    };
    let tape = Tape {
        fingerprint: params.weights.fingerprint(),
        wide_sigmoid: params.wide_sigmoid,
        deep: deep_tape,
        wide: wide_tape,
    };
    Ok((deep_y + wide_y, tape))
}

/// Gradients of `upstream * output` with respect to every parameter.
pub fn model_backward(params: &ModelParams, tape: &Tape, upstream: f64) -> Result<ParamGradients> {
    let mut grads = params.weights.zeros_like();
    model_backward_into(params, tape, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`model_backward`] but accumulates into `grads`.
pub fn model_backward_into(
    params: &ModelParams,
    tape: &Tape,
    upstream: f64,
    grads: &mut ParamGradients,
) -> Result<()> {
    if tape.fingerprint != params.weights.fingerprint() || tape.wide_sigmoid != params.wide_sigmoid {
        return Err(NetError::StaleTape);
    }
    if tape.deep.is_none() && tape.wide.is_none() {
        return Err(NetError::EmptyTape);
    }
    if let (Some(d), Some(t), Some(g)) = (&params.weights.deep, &tape.deep, &mut grads.deep) {
        deep_backward(d, t, upstream, g)?;
    }
    if let (Some(_), Some(t), Some(g)) = (&params.weights.wide, &tape.wide, &mut grads.wide) {
        let dz = if tape.wide_sigmoid {
            upstream * t.out * (1.0 - t.out)
        } else {
            upstream
        };
        for (gw, x) in g.weights.iter_mut().zip(&t.x) {
            *gw += dz * x;
        }
        g.bias += dz;
    }
    Ok(())
}

fn deep_backward(deep: &DeepParams, tape: &DeepTape, upstream: f64, g: &mut DeepParams) -> Result<()> {
    let head = &deep.head;
    let gh = &mut g.head;
    let n = head.seq_len;
    let hd = deep.hidden_dim();

    gh.out_b += upstream;
    let mut dz2 = vec![0.0; DENSE2_WIDTH];
    for k in 0..DENSE2_WIDTH {
        gh.out_w[k] += upstream * tape.a2[k];
        let a = tape.a2[k];
        dz2[k] = upstream * head.out_w[k] * a * (1.0 - a);
    }

    let mut da1 = vec![0.0; DENSE1_WIDTH];
    for (r, &dz) in dz2.iter().enumerate() {
        gh.dense2_b[r] += dz;
        let row = r * DENSE1_WIDTH;
        for c in 0..DENSE1_WIDTH {
            gh.dense2_w[row + c] += dz * tape.a1[c];
            da1[c] += head.dense2_w[row + c] * dz;
        }
    }
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&tape.a1)
        .map(|(d, a)| d * a * (1.0 - a))
        .collect();

    let mut dproj = vec![0.0; n];
    for (r, &dz) in dz1.iter().enumerate() {
        gh.dense1_b[r] += dz;
        let row = r * n;
        for t in 0..n {
            gh.dense1_w[row + t] += dz * tape.proj[t];
            dproj[t] += head.dense1_w[row + t] * dz;
        }
    }

    let h2 = &tape.layers[1].hidden;
    let mut dh2 = vec![0.0; n * hd];
    for t in 0..n {
        let dp = dproj[t];
        gh.proj_b += dp;
        for k in 0..hd {
            gh.proj_w[k] += dp * h2[t * hd + k];
            dh2[t * hd + k] = dp * head.proj_w[k];
        }
    }

    let [g1, g2] = &mut g.lstm;
    let dh1 = lstm::layer_backward(&deep.lstm[1], &tape.layers[1], &dh2, g2, true)
        .expect("input gradient requested");
    lstm::layer_backward(&deep.lstm[0], &tape.layers[0], &dh1, g1, false);
    Ok(())
}
