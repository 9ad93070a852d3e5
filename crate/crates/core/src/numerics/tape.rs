//! Dynamic reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the rule needed to push gradients back to its inputs.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! Operations on the feature axis (concat, narrow, bias, per-channel scale,
//! channel gather) treat a tensor as `[batch, channels, rest...]`. The only
//! broadcasting rules are the per-channel ones in [`Tape::add_bias`] and
//! [`Tape::mul_channel`]; everything else requires identical shapes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::Tensor;
use crate::wavelet::{self, Downsampling};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    AddBias(usize, usize),
    MulChannel(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    Concat(Vec<usize>),
    Narrow { x: usize, start: usize, len: usize },
    Reshape(usize),
    Gather { x: usize, index: Vec<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    BatchNorm { x: usize, inv_std: Vec<f64> },
    Resample { x: usize, kind: Downsampling, down: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Batch statistics computed by [`Tape::batch_norm`], per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

/// View of a shape as `(outer, channels, inner)` around axis 1.
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let ch = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = shape.iter().skip(2).product();
    (outer, ch, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that no gradient flows into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input leaf whose gradient is tracked but not tied to a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Each parameter maps to one leaf per tape;
    /// non-trainable entries become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&idx) = self.param_nodes.get(&id) {
            return Var(idx);
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value().clone(),
            op: Op::Leaf,
            requires_grad: p.trainable(),
            param: Some(id),
        });
        let idx = self.nodes.len() - 1;
        self.param_nodes.insert(id, idx);
        Var(idx)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(name, value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::contract("div: divisor contains zero"));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).scale(k);
        self.push("scale", value, Op::Scale(a.0, k), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + k);
        self.push("add_scalar", value, Op::Shift(a.0), &[a.0])
    }

    /// `x[n, c, ...] + bias[c]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(bias));
        let (outer, ch, inner) = axis1(xs.shape());
        if xs.rank() < 2 || bs.shape() != [ch] {
            return Err(Error::shape("add_bias", xs.shape(), bs.shape()));
        }
        let mut out = xs.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let b = bs.data()[c];
                out[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        self.push("add_bias", value, Op::AddBias(x.0, bias.0), &[x.0, bias.0])
    }

    /// `x[n, c, ...] * g[c]`
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.value(x), self.value(g));
        let (outer, ch, inner) = axis1(xs.shape());
        if xs.rank() < 2 || gs.shape() != [ch] {
            return Err(Error::shape("mul_channel", xs.shape(), gs.shape()));
        }
        let mut out = xs.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let k = gs.data()[c];
                out[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v *= k);
            }
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        self.push("mul_channel", value, Op::MulChannel(x.0, g.0), &[x.0, g.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (at.shape(), bt.shape()) else {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(at.data(), bt.data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[m, n] = t.shape() else {
            return Err(Error::shape("transpose", t.shape(), &[0, 0]));
        };
        let value = Tensor::from_parts(vec![n, m], transpose_raw(t.data(), m, n));
        self.push("transpose", value, Op::Transpose(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        self.push("square", value, Op::Square(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a.0), &[a.0])
    }

    /// Sum over every axis but the leading one: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.per_sample();
        let out: Vec<f64> = t.data().chunks(m).map(|c| c.iter().sum()).collect();
        let value = Tensor::from_parts(vec![t.batch()], out);
        self.push("sum_per_sample", value, Op::SumPerSample(a.0), &[a.0])
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if ref_shape.len() < 2 {
            return Err(Error::shape("concat", &ref_shape, &[0, 0]));
        }
        let mut total_ch = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != ref_shape.len() || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
                return Err(Error::shape("concat", &ref_shape, s));
            }
            total_ch += s[1];
        }
        let (outer, _, inner) = axis1(&ref_shape);
        let mut out = Vec::with_capacity(outer * total_ch * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = total_ch;
        let value = Tensor::from_parts(shape, out);
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push("concat", value, Op::Concat(idx.clone()), &idx)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, ch, inner) = axis1(t.shape());
        if t.rank() < 2 || len == 0 || start + len > ch {
            return Err(Error::contract(format!(
                "narrow {start}..{} out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * ch + start) * inner..(o * ch + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let value = Tensor::from_parts(shape, out);
        self.push("narrow", value, Op::Narrow { x: x.0, start, len }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x.0), &[x.0])
    }

    /// `out[:, j] = x[:, index[j]]` along axis 1.
    pub fn gather_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (outer, ch, inner) = axis1(t.shape());
        if t.rank() < 2 || index.iter().any(|&i| i >= ch) {
            return Err(Error::contract(format!(
                "channel gather index out of range for shape {:?}",
                t.shape()
            )));
        }
        let k = index.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &src in index {
                out.extend_from_slice(&t.data()[(o * ch + src) * inner..(o * ch + src + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[1] = k;
        let value = Tensor::from_parts(shape, out);
        self.push(
            "gather_channels",
            value,
            Op::Gather {
                x: x.0,
                index: index.to_vec(),
            },
            &[x.0],
        )
    }

    /// 2-D convolution without bias: `x[n, cin, h, w]`, `w[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (&[n, cin, h, wd], &[cout, wcin, k, k2]) = (xt.shape(), wt.shape()) else {
            return Err(Error::shape("conv2d", xt.shape(), wt.shape()));
        };
        if cin != wcin || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", xt.shape(), wt.shape()));
        }
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad };
        let out = kernels::conv2d_forward(xt.data(), wt.data(), n, cout, &geom);
        let value = Tensor::from_parts(vec![n, cout, geom.out_h(), geom.out_w()], out);
        self.push("conv2d", value, Op::Conv2d { x: x.0, w: w.0, geom }, &[x.0, w.0])
    }

    /// Normalize each channel (axis 1) with statistics taken over the batch
    /// and all remaining axes. Returns the statistics used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (outer, ch, inner) = axis1(t.shape());
        let count = (outer * inner) as f64;
        if t.rank() < 2 || outer * inner < 2 {
            return Err(Error::contract(format!(
                "batch_norm needs at least two values per channel, shape {:?}",
                t.shape()
            )));
        }
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for o in 0..outer {
            for c in 0..ch {
                let s = &t.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                mean[c] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for c in 0..ch {
                let s = &t.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                out[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let v = self.push("batch_norm", value, Op::BatchNorm { x: x.0, inv_std }, &[x.0])?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Orthogonal 2×2 down- or upsampling, see [`crate::wavelet`].
    pub fn resample(&mut self, x: Var, kind: Downsampling, down: bool) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::shape("resample", t.shape(), &[0, 0, 0, 0]));
        }
        let value = if down {
            wavelet::downsample(t, kind)?
        } else {
            wavelet::upsample(t, kind)?
        };
        self.push("resample", value, Op::Resample { x: x.0, kind, down }, &[x.0])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass from `loss`, accumulating into the parameter gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for node in 0..self.nodes.len() {
            if let (Some(id), Some(g)) = (self.nodes[node].param, grads.grads[node].as_ref()) {
                if self.nodes[node].requires_grad {
                    store.accumulate_grad(id, g);
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), |g, y| g * y));
                acc(*b, zip(g, val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, zip(g, y, |g, y| g / y));
                let gb = Tensor::from_fn(y.shape(), |k| -g.data()[k] * x.data()[k] / (y.data()[k] * y.data()[k]));
                acc(*b, gb);
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let (outer, ch, inner) = axis1(g.shape());
                let mut gb = vec![0.0; ch];
                for o in 0..outer {
                    for (c, slot) in gb.iter_mut().enumerate() {
                        *slot += g.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner].iter().sum::<f64>();
                    }
                }
                acc(*b, Tensor::from_parts(vec![ch], gb));
            }
            Op::MulChannel(x, gam) => {
                let (xt, gt) = (val(*x), val(*gam));
                let (outer, ch, inner) = axis1(g.shape());
                let mut gx = g.data().to_vec();
                let mut gg = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let r = (o * ch + c) * inner..(o * ch + c + 1) * inner;
                        gg[c] += g.data()[r.clone()]
                            .iter()
                            .zip(&xt.data()[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        gx[r].iter_mut().for_each(|v| *v *= gt.data()[c]);
                    }
                }
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
                acc(*gam, Tensor::from_parts(vec![ch], gg));
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_a_bt_acc(g.data(), bt.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_at_b_acc(at.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[1], g.shape()[0]);
                acc(*a, Tensor::from_parts(vec![m, n], transpose_raw(g.data(), n, m)));
            }
            Op::Exp(a) => acc(*a, zip(g, &node.value, |g, y| g * y)),
            Op::Tanh(a) => acc(*a, zip(g, &node.value, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Square(a) => acc(*a, zip(g, val(*a), |g, x| 2.0 * g * x)),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::SumPerSample(a) => {
                let t = val(*a);
                let m = t.per_sample();
                acc(*a, Tensor::from_fn(t.shape(), |k| g.data()[k / m]));
            }
            Op::Concat(parts) => {
                let (outer, _, inner) = axis1(g.shape());
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let ch = shape[1];
                    if self.nodes[p].requires_grad {
                        let mut gp = Vec::with_capacity(outer * ch * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + ch) * inner]);
                        }
                        acc(p, Tensor::from_parts(shape, gp));
                    }
                    offset += ch;
                }
            }
            Op::Narrow { x, start, len } => {
                let shape = val(*x).shape().to_vec();
                let (outer, ch, inner) = axis1(&shape);
                let mut gx = vec![0.0; outer * ch * inner];
                for o in 0..outer {
                    gx[(o * ch + start) * inner..(o * ch + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::Reshape(x) => acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())),
            Op::Gather { x, index } => {
                let shape = val(*x).shape().to_vec();
                let (outer, ch, inner) = axis1(&shape);
                let k = index.len();
                let mut gx = vec![0.0; outer * ch * inner];
                for o in 0..outer {
                    for (j, &src) in index.iter().enumerate() {
                        let dst = &mut gx[(o * ch + src) * inner..(o * ch + src + 1) * inner];
                        let from = &g.data()[(o * k + j) * inner..(o * k + j + 1) * inner];
                        for (d, f) in dst.iter_mut().zip(from) {
                            *d += f;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::Conv2d { x, w, geom } => {
                let (xt, wt) = (val(*x), val(*w));
                let cout = wt.shape()[0];
                let (gx, gw) = kernels::conv2d_backward(xt.data(), wt.data(), g.data(), xt.shape()[0], cout, geom);
                acc(*x, Tensor::from_parts(xt.shape().to_vec(), gx));
                acc(*w, Tensor::from_parts(wt.shape().to_vec(), gw));
            }
            Op::BatchNorm { x, inv_std } => {
                let xhat = &node.value;
                let (outer, ch, inner) = axis1(g.shape());
                let m = (outer * inner) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let r = (o * ch + c) * inner..(o * ch + c + 1) * inner;
                        for (gv, xv) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            sum_g[c] += gv;
                            sum_gx[c] += gv * xv;
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        for k in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                            gx[k] = inv_std[c] / m * (m * g.data()[k] - sum_g[c] - xhat.data()[k] * sum_gx[c]);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Resample { x, kind, down } => {
                // the transform is orthogonal, so its adjoint is its inverse
                let gx = if *down {
                    wavelet::upsample(g, *kind)
                } else {
                    wavelet::downsample(g, *kind)
                };
                acc(*x, gx.expect("resample adjoint has a valid shape"));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |k| f(a.data()[k], b.data()[k]))
}

fn transpose_raw(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}
