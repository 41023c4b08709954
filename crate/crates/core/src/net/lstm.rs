use super::{sigmoid, NetError, Result};
use crate::rng::SplitMix64;

/// One LSTM layer.
///
/// `weights` is row-major `[4*hidden x (input + hidden)]`: rows are grouped by
/// gate in the order input, forget, output, candidate; columns hold the input
/// features followed by the previous hidden state. `bias` is `[4*hidden]` in
/// the same gate order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            weights: vec![0.0; 4 * hidden_dim * (input_dim + hidden_dim)],
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    pub(super) fn init(&mut self, rng: &mut SplitMix64) {
        let fan_in = self.input_dim + self.hidden_dim;
        let a = 1.0 / (fan_in as f64).sqrt();
        for w in &mut self.weights {
            *w = rng.uniform(-a, a);
        }
        self.bias.fill(0.0);
        let h = self.hidden_dim;
        self.bias[h..2 * h].fill(1.0);
    }

    fn cols(&self) -> usize {
        self.input_dim + self.hidden_dim
    }

    fn check(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        if self.weights.len() != 4 * h * (i + h) || self.bias.len() != 4 * h {
            return Err(NetError::DimensionMismatch(format!(
                "LSTM layer {i}->{h} has {} weights and {} biases",
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Writes activated gates `[i | f | o | g]` for the concatenated input.
    fn gates(&self, xh: &[f64], out: &mut [f64]) {
        let h = self.hidden_dim;
        let cols = self.cols();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * cols..(r + 1) * cols];
            let mut acc = self.bias[r];
            for (w, x) in row.iter().zip(xh) {
                acc += w * x;
            }
            *o = if r < 3 * h { sigmoid(acc) } else { acc.tanh() };
        }
    }
}

/// One recurrence step; returns `(h, c)`.
pub fn lstm_cell_step(
    params: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check()?;
    let h = params.hidden_dim;
    if x.len() != params.input_dim || h_prev.len() != h || c_prev.len() != h {
        return Err(NetError::DimensionMismatch(format!(
            "step inputs x={}, h={}, c={} for layer {}->{}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.input_dim,
            h
        )));
    }
    let xh: Vec<f64> = x.iter().chain(h_prev).copied().collect();
    let mut g = vec![0.0; 4 * h];
    params.gates(&xh, &mut g);
    let mut c = vec![0.0; h];
    let mut hn = vec![0.0; h];
    for k in 0..h {
        c[k] = g[h + k] * c_prev[k] + g[k] * g[3 * h + k];
        hn[k] = g[2 * h + k] * c[k].tanh();
    }
    Ok((hn, c))
}

/// Per-step activations of one layer over a whole sequence (row-major by step).
#[derive(Debug, Clone)]
pub(super) struct LayerTape {
    n: usize,
    xh: Vec<f64>,
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
    pub(super) hidden: Vec<f64>,
}

pub(super) fn layer_forward(params: &LstmLayerParams, input: &[f64], n: usize) -> Result<LayerTape> {
    params.check()?;
    let (id, h) = (params.input_dim, params.hidden_dim);
    if input.len() != n * id {
        return Err(NetError::DimensionMismatch(format!(
            "layer input {} != {n} x {id}",
            input.len()
        )));
    }
    let cols = id + h;
    let mut tape = LayerTape {
        n,
        xh: vec![0.0; n * cols],
        gates: vec![0.0; n * 4 * h],
        cell: vec![0.0; n * h],
        tanh_cell: vec![0.0; n * h],
        hidden: vec![0.0; n * h],
    };
    for t in 0..n {
        {
            let xh = &mut tape.xh[t * cols..(t + 1) * cols];
            xh[..id].copy_from_slice(&input[t * id..(t + 1) * id]);
            if t > 0 {
                xh[id..].copy_from_slice(&tape.hidden[(t - 1) * h..t * h]);
            }
        }
        let g = &mut tape.gates[t * 4 * h..(t + 1) * 4 * h];
        params.gates(&tape.xh[t * cols..(t + 1) * cols], g);
        for k in 0..h {
            let c_prev = if t > 0 { tape.cell[(t - 1) * h + k] } else { 0.0 };
            let c = g[h + k] * c_prev + g[k] * g[3 * h + k];
            let tc = c.tanh();
            tape.cell[t * h + k] = c;
            tape.tanh_cell[t * h + k] = tc;
            tape.hidden[t * h + k] = g[2 * h + k] * tc;
        }
    }
    Ok(tape)
}

/// Backpropagation through time for one layer.
///
/// `dh_ext` is the loss gradient arriving at each step's hidden output from
/// above (`[n x hidden]`). Parameter gradients are accumulated into `grads`.
/// Returns the gradient with respect to the layer input when `want_dx`.
pub(super) fn layer_backward(
    params: &LstmLayerParams,
    tape: &LayerTape,
    dh_ext: &[f64],
    grads: &mut LstmLayerParams,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (id, h) = (params.input_dim, params.hidden_dim);
    let cols = id + h;
    let n = tape.n;
    let mut dx = want_dx.then(|| vec![0.0; n * id]);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let mut dxh = vec![0.0; cols];

    for t in (0..n).rev() {
        let g = &tape.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let dh = dh_ext[t * h + k] + dh_next[k];
            let tc = tape.tanh_cell[t * h + k];
            let (ig, fg, og, cg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let c_prev = if t > 0 { tape.cell[(t - 1) * h + k] } else { 0.0 };
            let dc = dh * og * (1.0 - tc * tc) + dc_next[k];
            dz[k] = dc * cg * ig * (1.0 - ig);
            dz[h + k] = dc * c_prev * fg * (1.0 - fg);
            dz[2 * h + k] = dh * tc * og * (1.0 - og);
            dz[3 * h + k] = dc * ig * (1.0 - cg * cg);
            dc_next[k] = dc * fg;
        }
        let xh = &tape.xh[t * cols..(t + 1) * cols];
        dxh.fill(0.0);
        for (r, &d) in dz.iter().enumerate() {
            grads.bias[r] += d;
            let row = r * cols;
            let gw = &mut grads.weights[row..row + cols];
            let w = &params.weights[row..row + cols];
            for c in 0..cols {
                gw[c] += d * xh[c];
                dxh[c] += w[c] * d;
            }
        }
        if let Some(dx) = dx.as_mut() {
            dx[t * id..(t + 1) * id].copy_from_slice(&dxh[..id]);
        }
        dh_next.copy_from_slice(&dxh[id..]);
    }
    dx
}
