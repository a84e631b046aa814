//! Fused single-direction LSTM kernel with backpropagation through time.
//!
//! Gate order inside the 4H pre-activation vector is input, forget, cell
//! candidate, output.

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    /// Activated gates, [B, T, 4H].
    gates: Vec<f64>,
    /// Cell state, [B, T, H].
    cell: Vec<f64>,
}

pub(crate) fn forward(
    d: LstmDims,
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    bias: &[f64],
) -> (Vec<f64>, LstmCache) {
    let h = d.hidden;
    let g4 = 4 * h;
    let mut out = vec![0.0; d.batch * d.steps * h];
    let mut gates = vec![0.0; d.batch * d.steps * g4];
    let mut cell = vec![0.0; d.batch * d.steps * h];
    let mut a = vec![0.0; g4];
    let zeros = vec![0.0; h];
    for b in 0..d.batch {
        let mut prev_t: Option<usize> = None;
        for s in 0..d.steps {
            let t = d.time(s);
            let row = b * d.steps + t;
            a.copy_from_slice(bias);
            for (i, &xv) in x[row * d.input..(row + 1) * d.input].iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &wx[i * g4..(i + 1) * g4], &mut a);
                }
            }
            let (h_prev, c_prev) = match prev_t {
                Some(pt) => {
                    let pr = b * d.steps + pt;
                    (&out[pr * h..(pr + 1) * h], &cell[pr * h..(pr + 1) * h])
                }
                None => (&zeros[..], &zeros[..]),
            };
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv != 0.0 {
                    axpy(hv, &wh[k * g4..(k + 1) * g4], &mut a);
                }
            }
            let gate_row = &mut gates[row * g4..(row + 1) * g4];
            for k in 0..h {
                gate_row[k] = sigmoid(a[k]);
                gate_row[h + k] = sigmoid(a[h + k]);
                gate_row[2 * h + k] = a[2 * h + k].tanh();
                gate_row[3 * h + k] = sigmoid(a[3 * h + k]);
            }
            let mut c_new = vec![0.0; h];
            for k in 0..h {
                c_new[k] = gate_row[h + k] * c_prev[k] + gate_row[k] * gate_row[2 * h + k];
            }
            for k in 0..h {
                out[row * h + k] = gate_row[3 * h + k] * c_new[k].tanh();
            }
            cell[row * h..(row + 1) * h].copy_from_slice(&c_new);
            prev_t = Some(t);
        }
    }
    (out, LstmCache { gates, cell })
}

pub(crate) struct LstmGrads {
    pub dx: Vec<f64>,
    pub dwx: Vec<f64>,
    pub dwh: Vec<f64>,
    pub dbias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    d: LstmDims,
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    out: &[f64],
    cache: &LstmCache,
    dout: &[f64],
) -> LstmGrads {
    let h = d.hidden;
    let g4 = 4 * h;
    let mut dx = vec![0.0; x.len()];
    let mut dwx = vec![0.0; wx.len()];
    let mut dwh = vec![0.0; wh.len()];
    let mut dbias = vec![0.0; g4];
    let mut da = vec![0.0; g4];
    let zeros = vec![0.0; h];
    for b in 0..d.batch {
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for s in (0..d.steps).rev() {
            let t = d.time(s);
            let row = b * d.steps + t;
            let prev_row = (s > 0).then(|| b * d.steps + d.time(s - 1));
            let (h_prev, c_prev) = match prev_row {
                Some(pr) => (&out[pr * h..(pr + 1) * h], &cache.cell[pr * h..(pr + 1) * h]),
                None => (&zeros[..], &zeros[..]),
            };
            let g = &cache.gates[row * g4..(row + 1) * g4];
            let c = &cache.cell[row * h..(row + 1) * h];
            for k in 0..h {
                let (ig, fg, cg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = c[k].tanh();
                let dh = dout[row * h + k] + dh_next[k];
                let dc = dh * og * (1.0 - tc * tc) + dc_next[k];
                da[k] = dc * cg * ig * (1.0 - ig);
                da[h + k] = dc * c_prev[k] * fg * (1.0 - fg);
                da[2 * h + k] = dc * ig * (1.0 - cg * cg);
                da[3 * h + k] = dh * tc * og * (1.0 - og);
                dc_next[k] = dc * fg;
            }
            for (db, a) in dbias.iter_mut().zip(&da) {
                *db += a;
            }
            let xr = &x[row * d.input..(row + 1) * d.input];
            for (i, &xv) in xr.iter().enumerate() {
                let wrow = &wx[i * g4..(i + 1) * g4];
                dx[row * d.input + i] += dot(wrow, &da);
                if xv != 0.0 {
                    axpy(xv, &da, &mut dwx[i * g4..(i + 1) * g4]);
                }
            }
            for k in 0..h {
                dh_next[k] = dot(&wh[k * g4..(k + 1) * g4], &da);
                if h_prev[k] != 0.0 {
                    axpy(h_prev[k], &da, &mut dwh[k * g4..(k + 1) * g4]);
                }
            }
        }
    }
    LstmGrads {
        dx,
        dwx,
        dwh,
        dbias,
    }
}
