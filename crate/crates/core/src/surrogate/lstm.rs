//! Batched LSTM layers with hand-written backpropagation through time.
//!
//! Gate pre-activations for a batch `X` (B x in) are `X W + H_prev U + b`,
//! with the four gate blocks laid out column-wise as `[input | forget |
//! candidate | output]`, each `hidden` wide.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::state::RngStream;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(-bound, bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Candidate = 2,
    Output = 3,
}

/// Parameters of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// input x 4*hidden
    pub w: Array2<f64>,
    /// hidden x 4*hidden
    pub u: Array2<f64>,
    /// 4*hidden
    pub b: Array1<f64>,
}

/// Intermediates of one cell evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CellCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Post-activation gates `[i | f | c~ | o]`.
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayerParams {
            w: Array2::zeros((input, 4 * hidden)),
            u: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, forget bias at +1.
    pub fn init(input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut p = LstmLayerParams {
            w: uniform_init(input, 4 * hidden, 1.0 / (input as f64).sqrt(), rng),
            u: uniform_init(hidden, 4 * hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b: Array1::zeros(4 * hidden),
        };
        p.gate_bias_mut(Gate::Forget).fill(1.0);
        p
    }

    pub fn input_size(&self) -> usize {
        self.w.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> ndarray::ArrayViewMut1<'_, f64> {
        let h = self.hidden();
        let g = gate as usize;
        self.b.slice_mut(s![g * h..(g + 1) * h])
    }

    /// One step for a batch of rows.
    pub fn cell_forward(
        &self,
        x: ArrayView2<f64>,
        h_prev: ArrayView2<f64>,
        c_prev: ArrayView2<f64>,
    ) -> CellCache {
        let hd = self.hidden();
        let mut z = x.dot(&self.w);
        z += &h_prev.dot(&self.u);
        z += &self.b;
        for mut row in z.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k / hd == Gate::Candidate as usize {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
        }
        let i = z.slice(s![.., 0..hd]);
        let f = z.slice(s![.., hd..2 * hd]);
        let g = z.slice(s![.., 2 * hd..3 * hd]);
        let c = &f * &c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        CellCache {
            x: x.to_owned(),
            h_prev: h_prev.to_owned(),
            c_prev: c_prev.to_owned(),
            gates: z,
            c,
            tanh_c,
        }
    }

    /// Backward through one cell. `dh`/`dc` are the total gradients reaching
    /// this step's hidden and cell outputs. Accumulates parameter gradients
    /// into `grad` and returns `(dx, dh_prev, dc_prev)`.
    pub fn cell_backward(
        &self,
        cache: &CellCache,
        dh: ArrayView2<f64>,
        dc: ArrayView2<f64>,
        grad: &mut LstmLayerParams,
        need_dx: bool,
    ) -> (Option<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let hd = self.hidden();
        let bsz = dh.nrows();
        let gates = &cache.gates;
        let mut dz = Array2::<f64>::zeros((bsz, 4 * hd));
        let mut dc_prev = Array2::<f64>::zeros((bsz, hd));
        for r in 0..bsz {
            let grow = gates.row(r);
            let mut dzrow = dz.row_mut(r);
            for k in 0..hd {
                let i = grow[k];
                let f = grow[hd + k];
                let g = grow[2 * hd + k];
                let o = grow[3 * hd + k];
                let tc = cache.tanh_c[[r, k]];
                let dhk = dh[[r, k]];
                let dck = dc[[r, k]] + dhk * o * (1.0 - tc * tc);
                dzrow[k] = dck * g * i * (1.0 - i);
                dzrow[hd + k] = dck * cache.c_prev[[r, k]] * f * (1.0 - f);
                dzrow[2 * hd + k] = dck * i * (1.0 - g * g);
                dzrow[3 * hd + k] = dhk * tc * o * (1.0 - o);
                dc_prev[[r, k]] = dck * f;
            }
        }
        grad.w += &cache.x.t().dot(&dz);
        grad.u += &cache.h_prev.t().dot(&dz);
        grad.b += &dz.sum_axis(Axis(0));
        let dh_prev = dz.dot(&self.u.t());
        let dx = need_dx.then(|| dz.dot(&self.w.t()));
        (dx, dh_prev, dc_prev)
    }
}

/// Single-sample cell evaluation: returns `(h_t, c_t, cache)`.
pub fn lstm_cell_forward(
    layer: &LstmLayerParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, CellCache)> {
    check_dim(layer.input_size(), x_t.len())?;
    check_dim(layer.hidden(), h_prev.len())?;
    check_dim(layer.hidden(), c_prev.len())?;
    fn row(v: &[f64]) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((1, v.len()), v).expect("row view")
    }
    let cache = layer.cell_forward(row(x_t), row(h_prev), row(c_prev));
    let h = cache.hidden_output().row(0).to_vec();
    let c = cache.c.row(0).to_vec();
    Ok((h, c, cache))
}

impl CellCache {
    pub fn hidden_output(&self) -> Array2<f64> {
        let hd = self.c.ncols();
        &self.gates.slice(s![.., 3 * hd..4 * hd]) * &self.tanh_c
    }
}

/// A stack of LSTM layers; layer `l` consumes layer `l-1`'s hidden sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayerParams>,
}

/// Per-layer, per-step caches from [`LstmStack::forward`].
pub struct StackCache {
    steps: Vec<Vec<CellCache>>,
}

impl LstmStack {
    pub fn init(input: usize, hidden: &[usize], rng: &mut RngStream) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input;
        for &h in hidden {
            layers.push(LstmLayerParams::init(prev, h, rng));
            prev = h;
        }
        LstmStack { layers }
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_size(), l.hidden()))
                .collect(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn top_hidden(&self) -> usize {
        self.layers.last().expect("non-empty stack").hidden()
    }

    /// Runs a `(batch, steps, input)` sequence from zero initial states and
    /// returns the top layer's final hidden state.
    pub fn forward(&self, seq: ArrayView3<f64>, keep_cache: bool) -> (Array2<f64>, Option<StackCache>) {
        let (bsz, steps, _) = seq.dim();
        let mut inputs: Vec<Array2<f64>> = (0..steps)
            .map(|t| seq.slice(s![.., t, ..]).to_owned())
            .collect();
        let mut all = Vec::new();
        for layer in &self.layers {
            let hd = layer.hidden();
            let mut h = Array2::<f64>::zeros((bsz, hd));
            let mut c = Array2::<f64>::zeros((bsz, hd));
            let mut outs = Vec::with_capacity(steps);
            let mut caches = Vec::with_capacity(steps);
            for x in &inputs {
                let cache = layer.cell_forward(x.view(), h.view(), c.view());
                h = cache.hidden_output();
                c = cache.c.clone();
                outs.push(h.clone());
                if keep_cache {
                    caches.push(cache);
                }
            }
            inputs = outs;
            all.push(caches);
        }
        let top = inputs.pop().expect("at least one step");
        (top, keep_cache.then_some(StackCache { steps: all }))
    }

    /// Backpropagates a gradient on the final top-layer hidden state.
    pub fn backward(&self, cache: &StackCache, d_top: ArrayView2<f64>, grad: &mut LstmStack) {
        let steps = cache.steps[0].len();
        let bsz = d_top.nrows();
        let mut d_seq: Vec<Array2<f64>> = (0..steps)
            .map(|t| {
                if t + 1 == steps {
                    d_top.to_owned()
                } else {
                    Array2::zeros(d_top.raw_dim())
                }
            })
            .collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let hd = layer.hidden();
            let mut dh_next = Array2::<f64>::zeros((bsz, hd));
            let mut dc_next = Array2::<f64>::zeros((bsz, hd));
            let mut d_below = vec![Array2::<f64>::zeros((0, 0)); steps];
            for t in (0..steps).rev() {
                let dh = &d_seq[t] + &dh_next;
                let (dx, dh_prev, dc_prev) = layer.cell_backward(
                    &cache.steps[l][t],
                    dh.view(),
                    dc_next.view(),
                    &mut grad.layers[l],
                    l > 0,
                );
                if let Some(dx) = dx {
                    d_below[t] = dx;
                }
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
            d_seq = d_below;
        }
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.u.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.u.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.hidden()).collect()
    }
}

/// Fixed affine input/output scaling, stored with the model but not trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Normalization {
            in_shift: vec![0.0; d],
            in_scale: vec![1.0; d],
            out_shift: vec![0.0; d],
            out_scale: vec![1.0; d],
        }
    }

    /// Scales `(batch, steps, d)` windows into network units.
    pub(crate) fn normalize_inputs(&self, windows: ArrayView3<f64>) -> ndarray::Array3<f64> {
        let mut out = windows.to_owned();
        for mut lane in out.lanes_mut(Axis(2)) {
            Zip::from(&mut lane)
                .and(&self.in_shift[..])
                .and(&self.in_scale[..])
                .for_each(|x, m, s| *x = (*x - m) / s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_zero_state() {
        let layer = LstmLayerParams::zeros(3, 4);
        let (h, c, cache) = lstm_cell_forward(&layer, &[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
        assert!(c.iter().all(|v| *v == 0.0));
        let g = cache.gates.row(0);
        assert!(g.slice(s![0..4]).iter().all(|v| *v == 0.5));
        assert!(g.slice(s![8..12]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_memory() {
        let mut layer = LstmLayerParams::zeros(2, 3);
        layer.b.fill(-50.0);
        layer.gate_bias_mut(Gate::Forget).fill(50.0);
        let c_prev = [0.7, -1.3, 2.0];
        let (_, c, _) = lstm_cell_forward(&layer, &[0.4, 0.1], &[0.2, 0.0, -0.5], &c_prev).unwrap();
        for (a, b) in c.iter().zip(&c_prev) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_output_gate_silences_hidden() {
        let mut rng = RngStream::new(3, 0);
        let mut layer = LstmLayerParams::init(2, 3, &mut rng);
        layer.gate_bias_mut(Gate::Output).fill(-50.0);
        let (h, c, _) = lstm_cell_forward(&layer, &[0.4, 0.1], &[0.2, 0.0, -0.5], &[5.0, -5.0, 3.0]).unwrap();
        assert!(c.iter().any(|v| v.abs() > 0.1));
        assert!(h.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gate_ranges_on_random_inputs() {
        let mut rng = RngStream::new(8, 0);
        let stack = LstmStack::init(5, &[6, 4], &mut rng);
        let seq = ndarray::Array3::from_shape_simple_fn((7, 4, 5), || 3.0 * rng.standard_normal());
        let (_, cache) = stack.forward(seq.view(), true);
        for layer in cache.unwrap().steps {
            for cc in layer {
                let hd = cc.c.ncols();
                for (k, v) in cc.gates.indexed_iter() {
                    if k.1 / hd == Gate::Candidate as usize {
                        assert!(*v > -1.0 && *v < 1.0);
                    } else {
                        assert!(*v > 0.0 && *v < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let layer = LstmLayerParams::zeros(3, 4);
        assert!(lstm_cell_forward(&layer, &[1.0], &[0.0; 4], &[0.0; 4]).is_err());
    }
}
