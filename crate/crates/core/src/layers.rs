//! LSTM and bidirectional LSTM layers.
//!
//! Gate blocks inside every `4H` weight or bias are ordered input, forget,
//! cell, output:
//!
//! ```text
//! z  = Wx x_t + Wh h_{t-1} + b
//! i  = σ(z_i)   f = σ(z_f)   g = tanh(z_g)   o = σ(z_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```

use crate::error::{Error, Result};
use crate::graph::{axpy, dot, sigmoid};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Weights of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `4H × D`
    pub wx: Tensor,
    /// `4H × H`
    pub wh: Tensor,
    /// `4H`
    pub b: Tensor,
}

impl LstmCellParams {
    /// Uniform(−r, r) weights with `r = 1/sqrt(D + H)`, zero biases except the
    /// forget block, which starts at 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let r = 1.0 / ((input_dim + hidden) as f64).sqrt();
        let wx = Tensor::uniform(&[4 * hidden, input_dim], r, rng);
        let wh = Tensor::uniform(&[4 * hidden, hidden], r, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCellParams { wx, wh, b }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            wx: Tensor::zeros(&[4 * hidden, input_dim]),
            wh: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.wx.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.wh.dims() != [4 * h, h] || self.wx.rows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::config(format!(
                "inconsistent LSTM shapes wx {:?}, wh {:?}, b {:?}",
                self.wx.dims(),
                self.wh.dims(),
                self.b.dims()
            )));
        }
        Ok(())
    }
}

/// Gate pre-activations to activations, in place.
fn activate(z: &mut [f64], h: usize) {
    for (k, v) in z.iter_mut().enumerate() {
        *v = if k / h == 2 { v.tanh() } else { sigmoid(*v) };
    }
}

/// One LSTM time step. Returns `(h_t, c_t)`.
pub fn lstm_cell_step(p: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check()?;
    let h = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::config(format!(
            "lstm step expects x[{}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            p.input_dim(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = p.b.data().to_vec();
    for (k, zk) in z.iter_mut().enumerate() {
        *zk += dot(p.wx.row(k), x) + dot(p.wh.row(k), h_prev);
    }
    activate(&mut z, h);
    let (i, rest) = z.split_at(h);
    let (f, rest) = rest.split_at(h);
    let (g, o) = rest.split_at(h);
    let c: Vec<f64> = (0..h).map(|u| f[u] * c_prev[u] + i[u] * g[u]).collect();
    let hs = (0..h).map(|u| o[u] * c[u].tanh()).collect();
    Ok((hs, c))
}

/// Forward activations of a whole sequence, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    hidden: usize,
    steps: usize,
    reverse: bool,
    /// Activated gates per step, `T × 4H`, indexed by input row.
    gates: Vec<f64>,
    /// Cell states `T × H`.
    cells: Vec<f64>,
    /// `tanh(c_t)`, `T × H`.
    cells_tanh: Vec<f64>,
    /// Hidden states `T × H`.
    hidden_states: Vec<f64>,
}

impl LstmTrace {
    pub fn hidden_states(&self) -> Tensor {
        Tensor::matrix(self.steps, self.hidden, self.hidden_states.clone()).expect("trace shape")
    }

    /// Row consumed just before `t`, if any.
    fn prev(&self, t: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < self.steps).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }

    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.steps).rev())
        } else {
            Box::new(0..self.steps)
        }
    }
}

/// Runs one LSTM direction over the rows of `x` (`T × D`) from zero state.
pub fn lstm_sequence(x: &Tensor, wx: &Tensor, wh: &Tensor, b: &Tensor, reverse: bool) -> Result<LstmTrace> {
    let h = wh.cols();
    let d = x.cols();
    if wh.dims() != [4 * h, h] || wx.dims() != [4 * h, d] || b.len() != 4 * h {
        return Err(Error::config(format!(
            "lstm over {:?} input with wx {:?}, wh {:?}, b {:?}",
            x.dims(),
            wx.dims(),
            wh.dims(),
            b.dims()
        )));
    }
    let t_len = x.rows();
    let mut trace = LstmTrace {
        hidden: h,
        steps: t_len,
        reverse,
        gates: vec![0.0; t_len * 4 * h],
        cells: vec![0.0; t_len * h],
        cells_tanh: vec![0.0; t_len * h],
        hidden_states: vec![0.0; t_len * h],
    };
    let zero = vec![0.0; h];
    for t in trace.order() {
        let prev = trace.prev(t);
        let mut z = b.data().to_vec();
        let xt = x.row(t);
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += dot(wx.row(k), xt);
        }
        if let Some(p) = prev {
            let hp = &trace.hidden_states[p * h..(p + 1) * h];
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += dot(wh.row(k), hp);
            }
        }
        activate(&mut z, h);
        let c_prev = match prev {
            Some(p) => trace.cells[p * h..(p + 1) * h].to_vec(),
            None => zero.clone(),
        };
        for u in 0..h {
            let c = z[h + u] * c_prev[u] + z[u] * z[2 * h + u];
            let tc = c.tanh();
            trace.cells[t * h + u] = c;
            trace.cells_tanh[t * h + u] = tc;
            trace.hidden_states[t * h + u] = z[3 * h + u] * tc;
        }
        trace.gates[t * 4 * h..(t + 1) * 4 * h].copy_from_slice(&z);
    }
    Ok(trace)
}

pub(crate) struct LstmGrads {
    pub dx: Option<Vec<f64>>,
    pub dwx: Vec<f64>,
    pub dwh: Vec<f64>,
    pub db: Vec<f64>,
}

/// Backpropagation through time for [`lstm_sequence`] given `∂L/∂h` for every row.
pub(crate) fn lstm_sequence_backward(
    trace: &LstmTrace,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    dh_out: &[f64],
    want_dx: bool,
) -> LstmGrads {
    let h = trace.hidden;
    let d = x.cols();
    let t_len = trace.steps;
    let mut dz_all = vec![0.0; t_len * 4 * h];
    let mut dwh = vec![0.0; 4 * h * h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let order: Vec<usize> = trace.order().collect();
    for &t in order.iter().rev() {
        let prev = trace.prev(t);
        let gates = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        let dz = &mut dz_all[t * 4 * h..(t + 1) * 4 * h];
        for u in 0..h {
            let (i, f, g, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
            let tc = trace.cells_tanh[t * h + u];
            let c_prev = prev.map_or(0.0, |p| trace.cells[p * h + u]);
            let dh = dh_out[t * h + u] + dh_next[u];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
            dz[u] = dc * g * i * (1.0 - i);
            dz[h + u] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + u] = dc * i * (1.0 - g * g);
            dz[3 * h + u] = dh * tc * o * (1.0 - o);
            dc_next[u] = dc * f;
        }
        dh_next.fill(0.0);
        if let Some(p) = prev {
            let hp = &trace.hidden_states[p * h..(p + 1) * h];
            for (k, &dzk) in dz.iter().enumerate() {
                axpy(dzk, wh.row(k), &mut dh_next);
                axpy(dzk, hp, &mut dwh[k * h..(k + 1) * h]);
            }
        }
    }
    let mut dwx = vec![0.0; 4 * h * d];
    let mut db = vec![0.0; 4 * h];
    let mut dx = want_dx.then(|| vec![0.0; t_len * d]);
    for t in 0..t_len {
        let dz = &dz_all[t * 4 * h..(t + 1) * 4 * h];
        let xt = x.row(t);
        for (k, &dzk) in dz.iter().enumerate() {
            db[k] += dzk;
            axpy(dzk, xt, &mut dwx[k * d..(k + 1) * d]);
            if let Some(dx) = dx.as_mut() {
                axpy(dzk, wx.row(k), &mut dx[t * d..(t + 1) * d]);
            }
        }
    }
    LstmGrads { dx, dwx, dwh, db }
}

/// Forward and backward LSTM over the same input; output width `2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl BlstmLayer {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let forward = LstmCellParams::init(input_dim, hidden, rng);
        let backward = LstmCellParams::init(input_dim, hidden, rng);
        BlstmLayer { forward, backward }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }
}

/// `T × D` to `T × 2H`: row `t` is `[forward h_t | backward h_t]`, where the
/// backward direction reads the sequence from the last row to the first.
pub fn blstm_forward(layer: &BlstmLayer, seq: &Tensor) -> Result<Tensor> {
    layer.forward.check()?;
    layer.backward.check()?;
    if layer.forward.hidden() != layer.backward.hidden() || layer.forward.input_dim() != layer.backward.input_dim() {
        return Err(Error::config("blstm directions disagree on (H, D)"));
    }
    if seq.rows() == 0 {
        return Err(Error::config("blstm over an empty sequence"));
    }
    let f = &layer.forward;
    let b = &layer.backward;
    let fw = lstm_sequence(seq, &f.wx, &f.wh, &f.b, false)?.hidden_states();
    let bw = lstm_sequence(seq, &b.wx, &b.wh, &b.b, true)?.hidden_states();
    let h = f.hidden();
    let mut out = Vec::with_capacity(seq.rows() * 2 * h);
    for t in 0..seq.rows() {
        out.extend_from_slice(fw.row(t));
        out.extend_from_slice(bw.row(t));
    }
    Tensor::matrix(seq.rows(), 2 * h, out)
}
