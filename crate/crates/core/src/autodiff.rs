//! Single-shot reverse-mode tape.
//!
//! Values are recorded in creation order, so the node index is already a
//! topological order and `backward` is one reverse sweep. A tape may be
//! differentiated once; call [`Tape::reset_grads`] before differentiating again.

use crate::error::{Error, Result};
use crate::ops::{self, InstanceStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    /// Instance-normalize `input` then apply per-channel `scale`/`shift`.
    Modulate { input: Var, scale: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { input: Var, norms: Vec<f64>, eps: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Contrastive { a: Var, b: Var, dissimilar: Vec<bool>, margin: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d_3x3",
            Op::Relu(_) => "relu",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Modulate { .. } => "normalize_scale_shift",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Contrastive { .. } => "contrastive_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Drops accumulated gradients so the tape may be differentiated again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn conv2d_3x3(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d_3x3(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        self.push(y, Op::Conv { input, weight, bias, stride, padding }, &[input, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        self.push(y, Op::GlobalAvgPool(x), &[x])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        self.push(y, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// `scale · (x − μ(x)) / σ(x) + shift` with per-(sample, channel) spatial
    /// statistics of `x` itself; differentiable through the statistics.
    pub fn normalize_scale_shift(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4("normalize_scale_shift")?;
        for t in [scale, shift] {
            if self.value(t).shape() != [b, c] {
                return Err(Error::shape(
                    "normalize_scale_shift",
                    format!("expected [{b}, {c}], got {:?}", self.value(t).shape()),
                ));
            }
        }
        let stats = ops::instance_stats(xv, eps)?;
        let y = ops::normalize_scale_shift(xv, &stats, self.value(scale), self.value(shift))?;
        let InstanceStats { mean, std } = stats;
        let n = h * w;
        let mut xhat = xv.data().to_vec();
        for (bc, ch) in xhat.chunks_exact_mut(n).enumerate() {
            let (m, s) = (mean.data()[bc], std.data()[bc]);
            ch.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let inv_std = std.data().iter().map(|s| 1.0 / s).collect();
        self.push(y, Op::Modulate { input: x, scale, shift, xhat, inv_std }, &[x, scale, shift])
    }

    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = xv.dims2("l2_normalize")?;
        let norms = xv.data().chunks_exact(d).map(ops::row_norm).collect();
        let y = ops::l2_normalize(xv, eps)?;
        self.push(y, Op::L2Normalize { input: x, norms, eps }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor::from_fn(av.shape(), |i| f(av.data()[i], bv.data()[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::from_fn(xv.shape(), |i| factor * xv.data()[i]);
        self.push(y, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push(y, Op::Mean(x), &[x])
    }

    /// Mean over rows of `½·d²` for similar pairs and `½·max(0, margin − d)²`
    /// for dissimilar ones, `d` being the Euclidean row distance.
    pub fn contrastive_loss(&mut self, a: Var, b: Var, dissimilar: &[bool], margin: f64) -> Result<Var> {
        if margin.is_nan() || margin <= 0.0 {
            return Err(Error::Config(format!("contrastive margin must be positive, got {margin}")));
        }
        self.same_shape("contrastive_loss", a, b)?;
        let (rows, d) = self.value(a).dims2("contrastive_loss")?;
        if dissimilar.len() != rows || rows == 0 {
            return Err(Error::shape(
                "contrastive_loss",
                format!("{} labels for {rows} pairs", dissimilar.len()),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut total = 0.0;
        for (r, &neg) in dissimilar.iter().enumerate() {
            let dist = pair_distance(&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            total += if neg {
                let h = (margin - dist).max(0.0);
                0.5 * h * h
            } else {
                0.5 * dist * dist
            };
        }
        let y = Tensor::scalar(total / rows as f64);
        self.push(y, Op::Contrastive { a, b, dissimilar: dissimilar.to_vec(), margin }, &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Graph("backward called twice without reset_grads".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta.data()).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let node = &self.nodes[idx];
        let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { input, weight, bias, stride, padding } => {
                let need = [self.needs(input), self.needs(weight), self.needs(bias)];
                let grads = ops::conv2d_3x3_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    g,
                    stride,
                    padding,
                    need,
                )?;
                out.extend(grads.input.map(|t| (input, t)));
                out.extend(grads.weight.map(|t| (weight, t)));
                out.extend(grads.bias.map(|t| (bias, t)));
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                let gx = Tensor::from_fn(g.shape(), |i| if xv[i] > 0.0 { g.data()[i] } else { 0.0 });
                out.push((x, gx));
            }
            &Op::GlobalAvgPool(x) => {
                let shape = self.value(x).shape();
                let n = shape[2] * shape[3];
                let gx = Tensor::from_fn(shape, |i| g.data()[i / n] / n as f64);
                out.push((x, gx));
            }
            &Op::Linear { input, weight, bias } => {
                let (xv, wv) = (self.value(input), self.value(weight));
                let (rows, din) = xv.dims2("linear")?;
                let dout = wv.shape()[0];
                let gd = g.data();
                if self.needs(input) {
                    let mut gx = vec![0.0; rows * din];
                    for r in 0..rows {
                        for o in 0..dout {
                            let go = gd[r * dout + o];
                            let wrow = &wv.data()[o * din..(o + 1) * din];
                            for (gxv, w) in gx[r * din..(r + 1) * din].iter_mut().zip(wrow) {
                                *gxv += go * w;
                            }
                        }
                    }
                    out.push((input, Tensor::new(vec![rows, din], gx)?));
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; dout * din];
                    for r in 0..rows {
                        let xrow = &xv.data()[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = gd[r * dout + o];
                            for (gwv, x) in gw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *gwv += go * x;
                            }
                        }
                    }
                    out.push((weight, Tensor::new(vec![dout, din], gw)?));
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; dout];
                    for row in gd.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((bias, Tensor::vector(&gb)));
                }
            }
            Op::Modulate { input, scale, shift, xhat, inv_std } => {
                let (input, scale, shift) = (*input, *scale, *shift);
                let shape = self.value(input).shape().to_vec();
                let n = shape[2] * shape[3];
                let sv = self.value(scale).data();
                let gd = g.data();
                let bc_count = inv_std.len();
                let mut gscale = vec![0.0; bc_count];
                let mut gshift = vec![0.0; bc_count];
                let mut gx = vec![0.0; gd.len()];
                for bc in 0..bc_count {
                    let gch = &gd[bc * n..(bc + 1) * n];
                    let xch = &xhat[bc * n..(bc + 1) * n];
                    let sum_g: f64 = gch.iter().sum();
                    let sum_gx: f64 = gch.iter().zip(xch).map(|(a, b)| a * b).sum();
                    gshift[bc] = sum_g;
                    gscale[bc] = sum_gx;
                    // gradient through the normalization, with ĝ = scale·g
                    let a = sv[bc];
                    let mean_gh = a * sum_g / n as f64;
                    let mean_ghx = a * sum_gx / n as f64;
                    for ((o, gv), xh) in gx[bc * n..(bc + 1) * n].iter_mut().zip(gch).zip(xch) {
                        *o = inv_std[bc] * (a * gv - mean_gh - xh * mean_ghx);
                    }
                }
                let pc = vec![shape[0], shape[1]];
                if self.needs(input) {
                    out.push((input, Tensor::new(shape, gx)?));
                }
                if self.needs(scale) {
                    out.push((scale, Tensor::new(pc.clone(), gscale)?));
                }
                if self.needs(shift) {
                    out.push((shift, Tensor::new(pc, gshift)?));
                }
            }
            Op::L2Normalize { input, norms, eps } => {
                let y = &node.value;
                let d = y.shape()[1];
                let mut gx = vec![0.0; y.numel()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if nrm >= *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) / nrm;
                        }
                    } else {
                        for (o, gv) in dst.iter_mut().zip(gr) {
                            *o = gv / eps;
                        }
                    }
                }
                out.push((*input, Tensor::new(y.shape().to_vec(), gx)?));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, Tensor::from_fn(g.shape(), |i| -g.data()[i])));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                out.push((a, Tensor::from_fn(g.shape(), |i| g.data()[i] * bv[i])));
                out.push((b, Tensor::from_fn(g.shape(), |i| g.data()[i] * av[i])));
            }
            &Op::Scale(x, f) => out.push((x, Tensor::from_fn(g.shape(), |i| f * g.data()[i]))),
            &Op::Sum(x) => out.push((x, Tensor::full(self.value(x).shape(), g.data()[0]))),
            &Op::Mean(x) => {
                let xv = self.value(x);
                out.push((x, Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f64)));
            }
            Op::Contrastive { a, b, dissimilar, margin } => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                let d = av.shape()[1];
                let scale = g.data()[0] / dissimilar.len() as f64;
                let mut ga = vec![0.0; av.numel()];
                for (r, &neg) in dissimilar.iter().enumerate() {
                    let (ar, br) = (&av.data()[r * d..(r + 1) * d], &bv.data()[r * d..(r + 1) * d]);
                    let dist = pair_distance(ar, br);
                    // coefficient on (a − b); zero distance contributes nothing
                    let coef = if !neg {
                        scale
                    } else if dist < *margin && dist > 0.0 {
                        -scale * (margin - dist) / dist
                    } else {
                        0.0
                    };
                    for ((o, x), y) in ga[r * d..(r + 1) * d].iter_mut().zip(ar).zip(br) {
                        *o = coef * (x - y);
                    }
                }
                let shape = av.shape().to_vec();
                let gb = ga.iter().map(|v| -v).collect();
                out.push((a, Tensor::new(shape.clone(), ga)?));
                out.push((b, Tensor::new(shape, gb)?));
            }
        }
        for (v, t) in out {
            if self.needs(v) {
                if !t.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                self.accumulate(v, t);
            }
        }
        Ok(())
    }
}

pub(crate) fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
