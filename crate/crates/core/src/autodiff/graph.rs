//! Tape of recorded operations and reverse-mode gradient accumulation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lstm::{self, LstmCache, LstmDims};
use super::tensor::axis_split;
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulBroadcast {
        gate: Var,
        x: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SqrtFloor(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Lstm {
        x: Var,
        wx: Var,
        wh: Var,
        b: Var,
        dims: LstmDims,
        cache: LstmCache,
    },
    Aam {
        emb: Var,
        w: Var,
        labels: Vec<usize>,
        margin: f64,
        scale: f64,
        cos: Vec<f64>,
        emb_norm: Vec<f64>,
        w_norm: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one row is present).
    pub var: Vec<f64>,
}

/// Records operations on tensors and parameters for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (batch, steps, channels) view of a [T, C] or [B, T, C] sequence tensor.
fn seq_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::shape(format!(
            "expected a [T, C] or [B, T, C] sequence, got {shape:?}"
        ))),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch taken by the piecewise operations on the tape:
    /// ReLU input signs, max arguments and floor hits. Two evaluations with
    /// equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.data(*x).iter().for_each(|&v| feed((v > 0.0) as u64)),
                Op::SqrtFloor(x, floor) => self.data(*x).iter().for_each(|&v| feed((v > *floor) as u64)),
                Op::MaxAxis { argmax, .. } => argmax.iter().for_each(|&a| feed(a as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        #[cfg(feature = "checked")]
        assert!(value.is_finite(), "non-finite value produced by an operation");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        let v = self.input(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// `gate` of shape [..., 1] multiplied into every channel of `x` [..., C].
    pub fn mul_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        let (gs, xs) = (self.shape(gate), self.shape(x));
        if gs.len() != xs.len() || gs[..gs.len() - 1] != xs[..xs.len() - 1] || gs[gs.len() - 1] != 1 {
            return Err(Error::shape(format!("mul_broadcast: {gs:?} vs {xs:?}")));
        }
        let c = *xs.last().unwrap();
        let g = self.data(gate);
        let xt = self.value(x);
        let data = xt
            .data()
            .chunks(c)
            .zip(g)
            .flat_map(|(row, &a)| row.iter().map(move |v| a * v))
            .collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulBroadcast { gate, x }, &[gate, x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// `sqrt(max(x, floor))`; zero gradient below the floor.
    pub fn sqrt_floor(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor).sqrt(), Op::SqrtFloor(x, floor))
    }

    /// `x W + b` over the last axis; `w` is [Din, Dout].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!("linear: bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = b.map(|b| self.data(b));
            for r in 0..rows {
                let o = &mut out[r * dout..(r + 1) * dout];
                if let Some(bd) = bd {
                    o.copy_from_slice(bd);
                }
                for (i, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, &wd[i * dout..(i + 1) * dout], o);
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Dilated 1-D convolution over time with "same" zero padding and stride 1.
    ///
    /// `x` is [T, Cin] or [B, T, Cin], `w` is [k, Cin, Cout] with odd k. Kernel
    /// tap j (centered index j - (k-1)/2) multiplies input frame
    /// q - r * (j - (k-1)/2) when producing output frame q.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (bsz, t_len, cin) = seq_dims(&xs)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::shape(format!("conv1d: input {xs:?}, kernel {ws:?}")));
        }
        let (k, cout) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d: kernel size {k} must be odd")));
        }
        if dilation < 1 {
            return Err(Error::config("conv1d: dilation must be >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv1d: bias {:?}", self.shape(b))));
            }
        }
        let half = (k / 2) as isize;
        let mut out = vec![0.0; bsz * t_len * cout];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = b.map(|b| self.data(b));
            for bi in 0..bsz {
                for q in 0..t_len {
                    let o = &mut out[(bi * t_len + q) * cout..(bi * t_len + q + 1) * cout];
                    if let Some(bd) = bd {
                        o.copy_from_slice(bd);
                    }
                    for j in 0..k {
                        let s = q as isize - dilation as isize * (j as isize - half);
                        if s < 0 || s >= t_len as isize {
                            continue;
                        }
                        let xr = &xd[(bi * t_len + s as usize) * cin..][..cin];
                        for (ci, &xv) in xr.iter().enumerate() {
                            if xv != 0.0 {
                                axpy(xv, &wd[(j * cin + ci) * cout..][..cout], o);
                            }
                        }
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d { x, w, b, dilation },
            &inputs,
        ))
    }

    /// Batch norm over all leading axes, per channel (last axis), using the
    /// statistics of this batch. Returns the output and the batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let c = self.check_bn(x, gamma, beta)?;
        let xd = self.data(x);
        let n = xd.len() / c;
        let mut mean = vec![0.0; c];
        for row in xd.chunks(c) {
            axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xd.chunks(c) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased: Vec<f64> = if n > 1 {
            var.iter().map(|v| v / (n - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm: running statistics size"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm: {c} channels, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(c)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat: axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let s = self.shape(v);
                let chunk = s[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} in {xs:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `axis` into `n` equal parts.
    pub fn split(&mut self, x: Var, n: usize, axis: usize) -> Result<Vec<Var>> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("split: axis out of range"))?;
        if n == 0 || extent % n != 0 {
            return Err(Error::shape(format!("split: {extent} not divisible into {n} parts")));
        }
        let part = extent / n;
        (0..n).map(|i| self.slice(x, axis, i * part, part)).collect()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    fn reduce(&self, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let mut shape = xs;
        shape[axis] = 1;
        Ok((shape, outer, n, inner))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, n, inner) = self.reduce(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                axpy(1.0, &xd[(o * n + a) * inner..][..inner], &mut out[o * inner..][..inner]);
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, &[x]))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, n, inner) = self.reduce(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                axpy(1.0, &xd[(o * n + a) * inner..][..inner], &mut out[o * inner..][..inner]);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Max over `axis`, keeping it with extent 1. The gradient goes to the
    /// first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, n, inner) = self.reduce(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    let v = xd[(o * n + a) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = a;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax: axis {axis} for {xs:?}")));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let m = (0..n).map(|a| xd[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..n {
                    let e = (xd[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    out[idx(a)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x, axis }, &[x]))
    }

    /// Inverted dropout: identity in eval mode or when `p == 0`; otherwise
    /// zeroes each entry with probability `p` and scales survivors by 1/(1-p).
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xt = self.value(x);
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// One LSTM direction over a [T, Din] or [B, T, Din] sequence.
    /// `wx` is [Din, 4H], `wh` is [H, 4H], `b` is [4H]; gates are ordered
    /// input, forget, candidate, output. Output is [.., T, H].
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, b: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, steps, input) = seq_dims(&xs)?;
        let whs = self.shape(wh).to_vec();
        if whs.len() != 2 || whs[1] != 4 * whs[0] {
            return Err(Error::shape(format!("lstm: recurrent weight {whs:?}")));
        }
        let hidden = whs[0];
        if self.shape(wx) != [input, 4 * hidden] || self.shape(b) != [4 * hidden] {
            return Err(Error::shape(format!(
                "lstm: input {xs:?}, wx {:?}, b {:?}",
                self.shape(wx),
                self.shape(b)
            )));
        }
        let dims = LstmDims {
            batch,
            steps,
            input,
            hidden,
            reverse,
        };
        let (out, cache) = lstm::forward(dims, self.data(x), self.data(wx), self.data(wh), self.data(b));
        let mut shape = xs;
        *shape.last_mut().unwrap() = hidden;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                dims,
                cache,
            },
            &[x, wx, wh, b],
        ))
    }

    /// Additive angular margin logits. `emb` is [B, E], `w` is [N, E]. For row
    /// b, logit j is `scale * cos(theta_j)` except the target `labels[b]`, which
    /// gets `scale * cos(theta + margin)`.
    pub fn aam_logits(
        &mut self,
        emb: Var,
        w: Var,
        labels: &[usize],
        margin: f64,
        scale: f64,
    ) -> Result<Var> {
        let es = self.shape(emb).to_vec();
        let ws = self.shape(w).to_vec();
        if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] || labels.len() != es[0] {
            return Err(Error::shape(format!(
                "aam: embeddings {es:?}, weights {ws:?}, {} labels",
                labels.len()
            )));
        }
        let (bsz, dim, n) = (es[0], es[1], ws[0]);
        if let Some(&l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::shape(format!("aam: label {l} out of {n} classes")));
        }
        let ed = self.data(emb);
        let wd = self.data(w);
        let emb_norm: Vec<f64> = ed.chunks(dim).map(|r| dot(r, r).sqrt()).collect();
        let w_norm: Vec<f64> = wd.chunks(dim).map(|r| dot(r, r).sqrt()).collect();
        if emb_norm.iter().chain(&w_norm).any(|&v| v == 0.0) {
            return Err(Error::DegenerateInput(
                "zero-norm embedding or class weight".into(),
            ));
        }
        let mut cos = vec![0.0; bsz * n];
        let mut out = vec![0.0; bsz * n];
        let (cm, sm) = (margin.cos(), margin.sin());
        for b in 0..bsz {
            let e = &ed[b * dim..(b + 1) * dim];
            for j in 0..n {
                let c = dot(e, &wd[j * dim..(j + 1) * dim]) / (emb_norm[b] * w_norm[j]);
                cos[b * n + j] = c;
                out[b * n + j] = if j == labels[b] {
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    scale * (c * cm - s * sm)
                } else {
                    scale * c
                };
            }
        }
        Ok(self.push(
            Tensor::new(vec![bsz, n], out)?,
            Op::Aam {
                emb,
                w,
                labels: labels.to_vec(),
                margin,
                scale,
                cos,
                emb_norm,
                w_norm,
            },
            &[emb, w],
        ))
    }

    /// Mean categorical cross-entropy of [B, N] logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {ls:?}, {} labels",
                labels.len()
            )));
        }
        let n = ls[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::shape(format!("cross_entropy: label {l} out of {n} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for (b, row) in ld.chunks(n).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs[b * n..(b + 1) * n].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss += m + z.ln() - row[labels[b]];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params: Vec<(ParamId, Vec<f64>)> = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value_ref(self);
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.grad_slot(grads, *v) {
                        axpy(1.0, gy, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.grad_slot(grads, *a) {
                    axpy(1.0, gy, g);
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    axpy(-1.0, gy, g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(g) = self.grad_slot(grads, *a) {
                    for ((gi, &d), &bv) in g.iter_mut().zip(gy).zip(bd) {
                        *gi += d * bv;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    for ((gi, &d), &av) in g.iter_mut().zip(gy).zip(ad) {
                        *gi += d * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    axpy(*s, gy, g);
                }
            }
            Op::MulBroadcast { gate, x } => {
                let c = self.value(*x).last_dim();
                let (gd, xd) = (self.data(*gate), self.data(*x));
                if let Some(g) = self.grad_slot(grads, *gate) {
                    for (r, gr) in g.iter_mut().enumerate() {
                        *gr += dot(&gy[r * c..(r + 1) * c], &xd[r * c..(r + 1) * c]);
                    }
                }
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (r, &a) in gd.iter().enumerate() {
                        axpy(a, &gy[r * c..(r + 1) * c], &mut g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gi, &d), &v) in g.iter_mut().zip(gy).zip(xd) {
                        if v > 0.0 {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gi, &d), &s) in g.iter_mut().zip(gy).zip(y.data()) {
                        *gi += d * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gi, &d), &t) in g.iter_mut().zip(gy).zip(y.data()) {
                        *gi += d * (1.0 - t * t);
                    }
                }
            }
            Op::SqrtFloor(x, floor) => {
                let xd = self.data(*x);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (((gi, &d), &s), &v) in g.iter_mut().zip(gy).zip(y.data()).zip(xd) {
                        if v > *floor {
                            *gi += d * 0.5 / s;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let xd = self.data(*x);
                let wd = self.data(*w);
                let rows = xd.len() / din;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &gy[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            g[r * din + i] += dot(&wd[i * dout..(i + 1) * dout], gr);
                        }
                    }
                }
                if let Some(g) = self.grad_slot(grads, *w) {
                    for r in 0..rows {
                        let gr = &gy[r * dout..(r + 1) * dout];
                        for (i, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
                            if xv != 0.0 {
                                axpy(xv, gr, &mut g[i * dout..(i + 1) * dout]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(g) = self.grad_slot(grads, *b) {
                        for gr in gy.chunks(dout) {
                            axpy(1.0, gr, g);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (bsz, t_len, cin) = seq_dims(self.shape(*x)).expect("checked");
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let half = (k / 2) as isize;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let taps = |q: usize, j: usize| {
                    let s = q as isize - *dilation as isize * (j as isize - half);
                    (s >= 0 && s < t_len as isize).then_some(s as usize)
                };
                if let Some(g) = self.grad_slot(grads, *x) {
                    for bi in 0..bsz {
                        for q in 0..t_len {
                            let gr = &gy[(bi * t_len + q) * cout..][..cout];
                            for j in 0..k {
                                let Some(s) = taps(q, j) else { continue };
                                let gx = &mut g[(bi * t_len + s) * cin..][..cin];
                                for (ci, gxi) in gx.iter_mut().enumerate() {
                                    *gxi += dot(&wd[(j * cin + ci) * cout..][..cout], gr);
                                }
                            }
                        }
                    }
                }
                if let Some(g) = self.grad_slot(grads, *w) {
                    for bi in 0..bsz {
                        for q in 0..t_len {
                            let gr = &gy[(bi * t_len + q) * cout..][..cout];
                            for j in 0..k {
                                let Some(s) = taps(q, j) else { continue };
                                let xr = &xd[(bi * t_len + s) * cin..][..cin];
                                for (ci, &xv) in xr.iter().enumerate() {
                                    if xv != 0.0 {
                                        axpy(xv, gr, &mut g[(j * cin + ci) * cout..][..cout]);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(g) = self.grad_slot(grads, *b) {
                        for gr in gy.chunks(cout) {
                            axpy(1.0, gr, g);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = gy.len() / c;
                let gd = self.data(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += gr[ch];
                        sum_dy_xhat[ch] += gr[ch] * hr[ch];
                    }
                }
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gx, gr), hr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch];
                            gx[ch] += if *train {
                                scale
                                    * (gr[ch]
                                        - sum_dy[ch] / n as f64
                                        - hr[ch] * sum_dy_xhat[ch] / n as f64)
                            } else {
                                scale * gr[ch]
                            };
                        }
                    }
                }
                if let Some(g) = self.grad_slot(grads, *gamma) {
                    axpy(1.0, &sum_dy_xhat, g);
                }
                if let Some(g) = self.grad_slot(grads, *beta) {
                    axpy(1.0, &sum_dy, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(y.shape(), *axis);
                let total = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(g) = self.grad_slot(grads, v) {
                        for o in 0..outer {
                            axpy(
                                1.0,
                                &gy[o * total + offset..o * total + offset + chunk],
                                &mut g[o * chunk..(o + 1) * chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = y.shape()[*axis];
                if let Some(g) = self.grad_slot(grads, *x) {
                    for o in 0..outer {
                        axpy(
                            1.0,
                            &gy[o * len * inner..(o + 1) * len * inner],
                            &mut g[(o * n + start) * inner..(o * n + start + len) * inner],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    axpy(1.0, gy, g);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let s = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                if let Some(g) = self.grad_slot(grads, *x) {
                    for o in 0..outer {
                        for a in 0..n {
                            axpy(
                                s,
                                &gy[o * inner..(o + 1) * inner],
                                &mut g[(o * n + a) * inner..][..inner],
                            );
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let a = argmax[o * inner + ii];
                            g[(o * n + a) * inner + ii] += gy[o * inner + ii];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                if let Some(g) = self.grad_slot(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |a: usize| (o * n + a) * inner + ii;
                            let s: f64 = (0..n).map(|a| gy[idx(a)] * yd[idx(a)]).sum();
                            for a in 0..n {
                                g[idx(a)] += yd[idx(a)] * (gy[idx(a)] - s);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gi, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                        *gi += d * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                dims,
                cache,
            } => {
                let lg = lstm::backward(
                    *dims,
                    self.data(*x),
                    self.data(*wx),
                    self.data(*wh),
                    y.data(),
                    cache,
                    gy,
                );
                for (v, d) in [(*x, &lg.dx), (*wx, &lg.dwx), (*wh, &lg.dwh), (*b, &lg.dbias)] {
                    if let Some(g) = self.grad_slot(grads, v) {
                        axpy(1.0, d, g);
                    }
                }
            }
            Op::Aam {
                emb,
                w,
                labels,
                margin,
                scale,
                cos,
                emb_norm,
                w_norm,
            } => {
                let dim = self.value(*emb).last_dim();
                let n = w_norm.len();
                let (ed, wd) = (self.data(*emb), self.data(*w));
                let (cm, sm) = (margin.cos(), margin.sin());
                // d loss / d cos
                let dcos: Vec<f64> = (0..gy.len())
                    .map(|idx| {
                        let (b, j) = (idx / n, idx % n);
                        if j == labels[b] {
                            let c = cos[idx];
                            let s = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
                            gy[idx] * scale * (cm + c / s * sm)
                        } else {
                            gy[idx] * scale
                        }
                    })
                    .collect();
                if let Some(g) = self.grad_slot(grads, *emb) {
                    for (b, en) in emb_norm.iter().enumerate() {
                        let e = &ed[b * dim..(b + 1) * dim];
                        let gb = &mut g[b * dim..(b + 1) * dim];
                        for j in 0..n {
                            let d = dcos[b * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            let wr = &wd[j * dim..(j + 1) * dim];
                            let c = cos[b * n + j];
                            for k in 0..dim {
                                gb[k] += d * (wr[k] / w_norm[j] - c * e[k] / en) / en;
                            }
                        }
                    }
                }
                if let Some(g) = self.grad_slot(grads, *w) {
                    for (j, wn) in w_norm.iter().enumerate() {
                        let wr = &wd[j * dim..(j + 1) * dim];
                        let gj = &mut g[j * dim..(j + 1) * dim];
                        for (b, en) in emb_norm.iter().enumerate() {
                            let d = dcos[b * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            let e = &ed[b * dim..(b + 1) * dim];
                            let c = cos[b * n + j];
                            for k in 0..dim {
                                gj[k] += d * (e[k] / en - c * wr[k] / wn) / wn;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = probs.len() / labels.len();
                let s = gy[0] / labels.len() as f64;
                if let Some(g) = self.grad_slot(grads, *logits) {
                    for (b, &l) in labels.iter().enumerate() {
                        for j in 0..n {
                            let t = if j == l { 1.0 } else { 0.0 };
                            g[b * n + j] += s * (probs[b * n + j] - t);
                        }
                    }
                }
            }
        }
    }
}

impl Node {
    fn value_ref<'a>(&'a self, g: &'a Graph<'_>) -> &'a Tensor {
        match &self.value {
            Value::Owned(t) => t,
            Value::Param(id) => g.params.value(*id),
        }
    }
}
