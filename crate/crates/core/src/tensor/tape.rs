use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm;
use super::kernels::{self, ResizePlan};
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape.
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the engine.
///
/// Receives the input values and the gradient flowing into the output, and
/// returns one gradient buffer per input (`None` for "no contribution").
pub trait BackwardRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
        plan: ResizePlan,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run recording of one forward pass.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers. [`Tape::backward`] may run once; build a new tape for the next
/// pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when
    /// `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Moves the gradient buffer out of the tape (zeros when unreached).
    pub fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .unwrap_or_else(|| vec![0.0; node.value.len()])
    }

    /// Copy of `x` that is cut from the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// Stride-1, zero-padded ("same") cross-correlation with an odd square
    /// kernel. `input` is `[C_in,H,W]`, `kernel` is `[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(input).dims3()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [cout, kcin, kh, kw] = kshape[..] else {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be [C_out,C_in,k,k], got {:?}", kshape),
            ));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", self.value(input).shape(), &kshape));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square with odd size, got {}x{}", kh, kw),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape("conv2d", self.value(bias).shape(), &[cout]));
        }
        let k = kh;
        let hw = h * w;
        let cols = kernels::im2col(self.value(input).data(), cin, h, w, k);
        let mut out = vec![0.0; cout * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(self.value(bias).data()[co]);
        }
        gemm(
            cout,
            cin * k * k,
            hw,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let value = Tensor {
            shape: vec![cout, h, w],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2",
                format!("extents must be even, got {}x{}", h, w),
            ));
        }
        let (out, argmax) = kernels::maxpool2(self.value(input).data(), c, h, w);
        let value = Tensor {
            shape: vec![c, h / 2, w / 2],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Bilinear resize to `(out_h, out_w)`, align-corners-false.
    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let plan = ResizePlan::new((h, w), (out_h, out_w))?;
        let value = Tensor {
            shape: vec![c, out_h, out_w],
            data: plan.forward(self.value(input).data(), c),
        };
        Ok(self.push(value, Op::Resize { input, plan }, &[input]))
    }

    /// Bilinear 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (_, h, w) = self.value(input).dims3()?;
        self.resize(input, 2 * h, 2 * w)
    }

    /// Affine map `weights · input + bias`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weights);
        let &[m, n] = wt.shape() else {
            return Err(Error::invalid("dense", "weights must be [m,n]"));
        };
        if x.shape() != [n] {
            return Err(Error::shape("dense", x.shape(), wt.shape()));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::shape("dense", self.value(bias).shape(), &[m]));
        }
        let mut out = self.value(bias).data().to_vec();
        gemm(m, n, 1, wt.data(), false, x.data(), false, &mut out, 1.0);
        let value = Tensor {
            shape: vec![m],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            &[input, weights, bias],
        ))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map_unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Softmax across the leading (class) axis, independently per position.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let Some((&c, _)) = src.shape().split_first() else {
            return Err(Error::invalid("softmax", "needs at least one axis"));
        };
        let n = src.len() / c.max(1);
        let mut out = vec![0.0; src.len()];
        for p in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(src.data[ci * n + p]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = math::exp(src.data[ci * n + p] - mx);
                out[ci * n + p] = e;
                z += e;
            }
            for ci in 0..c {
                out[ci * n + p] /= z;
            }
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data: out,
        };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    fn zip_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `input[c, ..] * scale[c]` for a `[C, ..]` input and a `[C]` scale.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (x, s) = (self.value(input), self.value(scale));
        let c = x.shape().first().copied().unwrap_or(0);
        if s.shape() != [c] {
            return Err(Error::shape("channel_scale", x.shape(), s.shape()));
        }
        let plane = x.len() / c.max(1);
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s.data[i / plane])
            .collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::ChannelScale { input, scale }, &[input, scale]))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", self.value(*first).shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Spatial mean of each channel: `[C,H,W]` to `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor {
            shape: vec![c],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Propagates d(loss)/d(node) to every node that requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let contributions = backward_op(&node.op, before, &node.value, &g);
            for (target, c) in contributions {
                let dst = &mut before[target.0];
                match &mut dst.grad {
                    Some(existing) => add_into(existing, &c),
                    None => dst.grad = Some(c),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn backward_op(op: &Op, nodes: &[Node], out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let wants = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            cols,
        } => {
            let (cin, h, w) = (val(*input).shape[0], val(*input).shape[1], val(*input).shape[2]);
            let cout = val(*kernel).shape[0];
            let k = val(*kernel).shape[2];
            let hw = h * w;
            let ckk = cin * k * k;
            if wants(*kernel) {
                let mut dk = vec![0.0; cout * ckk];
                gemm(cout, hw, ckk, g, false, cols, true, &mut dk, 0.0);
                res.push((*kernel, dk));
            }
            if wants(*bias) {
                res.push((*bias, g.chunks(hw).map(|r| r.iter().sum()).collect()));
            }
            if wants(*input) {
                let mut dcols = vec![0.0; ckk * hw];
                gemm(ckk, cout, hw, val(*kernel).data(), true, g, false, &mut dcols, 0.0);
                res.push((*input, kernels::col2im(&dcols, cin, h, w, k)));
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if wants(*input) {
                let mut dx = vec![0.0; val(*input).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                res.push((*input, dx));
            }
        }
        Op::Resize { input, plan } => {
            if wants(*input) {
                res.push((*input, plan.backward(g, val(*input).shape[0])));
            }
        }
        Op::Dense {
            input,
            weights,
            bias,
        } => {
            let (m, n) = (val(*weights).shape[0], val(*weights).shape[1]);
            if wants(*weights) {
                let x = val(*input).data();
                let mut dw = vec![0.0; m * n];
                for (row, gi) in dw.chunks_mut(n).zip(g) {
                    for (d, xi) in row.iter_mut().zip(x) {
                        *d = gi * xi;
                    }
                }
                res.push((*weights, dw));
            }
            if wants(*bias) {
                res.push((*bias, g.to_vec()));
            }
            if wants(*input) {
                let mut dx = vec![0.0; n];
                gemm(n, m, 1, val(*weights).data(), true, g, false, &mut dx, 0.0);
                res.push((*input, dx));
            }
        }
        Op::Relu(x) => {
            if wants(*x) {
                let dx = g
                    .iter()
                    .zip(&out.data)
                    .map(|(gi, y)| if *y > 0.0 { *gi } else { 0.0 })
                    .collect();
                res.push((*x, dx));
            }
        }
        Op::Sigmoid(x) => {
            if wants(*x) {
                let dx = g.iter().zip(&out.data).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                res.push((*x, dx));
            }
        }
        Op::Softmax(x) => {
            if wants(*x) {
                let c = out.shape[0];
                let n = out.len() / c.max(1);
                let y = &out.data;
                let mut dx = vec![0.0; out.len()];
                for p in 0..n {
                    let dot: f64 = (0..c).map(|ci| y[ci * n + p] * g[ci * n + p]).sum();
                    for ci in 0..c {
                        let idx = ci * n + p;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Abs(x) => {
            if wants(*x) {
                let dx = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(gi, v)| {
                        if *v > 0.0 {
                            *gi
                        } else if *v < 0.0 {
                            -*gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                res.push((*x, dx));
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(v) {
                    res.push((v, g.to_vec()));
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                res.push((*a, g.to_vec()));
            }
            if wants(*b) {
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                res.push((*a, g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect()));
            }
            if wants(*b) {
                res.push((*b, g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect()));
            }
        }
        Op::Scale(x, f) => {
            if wants(*x) {
                res.push((*x, g.iter().map(|v| v * f).collect()));
            }
        }
        Op::ChannelScale { input, scale } => {
            let s = &val(*scale).data;
            let c = s.len();
            let plane = out.len() / c.max(1);
            if wants(*input) {
                let dx = g.iter().enumerate().map(|(i, gi)| gi * s[i / plane]).collect();
                res.push((*input, dx));
            }
            if wants(*scale) {
                let x = &val(*input).data;
                let ds = (0..c)
                    .map(|ci| {
                        let r = ci * plane..(ci + 1) * plane;
                        g[r.clone()].iter().zip(&x[r]).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                res.push((*scale, ds));
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if wants(p) {
                    res.push((p, g[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::GlobalAvgPool(x) => {
            if wants(*x) {
                let plane = val(*x).len() / out.len().max(1);
                let inv = 1.0 / plane as f64;
                let dx = (0..val(*x).len()).map(|i| g[i / plane] * inv).collect();
                res.push((*x, dx));
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                res.push((*x, vec![g[0]; val(*x).len()]));
            }
        }
        Op::Mean(x) => {
            if wants(*x) {
                let n = val(*x).len().max(1);
                res.push((*x, vec![g[0] / n as f64; val(*x).len()]));
            }
        }
        Op::Custom { inputs, rule } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
            for (v, d) in inputs.iter().zip(rule.backward(&vals, out, g)) {
                if let Some(d) = d {
                    if wants(*v) {
                        res.push((*v, d));
                    }
                }
            }
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.param(t(&[2, 3, 4], &data));
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        k.data_mut()[4] = 1.0; // out 0 <- in 0 center
        k.data_mut()[18 + 9 + 4] = 1.0; // out 1 <- in 1 center
        let k = tape.param(k);
        let b = tape.param(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn all_ones_kernel_on_constant_field() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 5], 0.7));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        let v = tape.value(y);
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((v.data()[yy * 5 + xx] - 6.3).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 neighbourhood
        assert!((v.data()[0] - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        match tape.conv2d(x, k, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 4, 4]);
                assert_eq!(right, vec![1, 3, 3, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.id())),
        }
    }

    #[test]
    fn maxpool_single_window_and_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(tape.maxpool2(odd), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn maxpool_tie_routes_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 2, 2], 1.0));
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_image_survives_pool_and_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4, 6], 1.5));
        let p = tape.maxpool2(x).unwrap();
        let u = tape.upsample2(x).unwrap();
        assert!(tape.value(p).data().iter().all(|v| *v == 1.5));
        assert!(tape.value(u).data().iter().all(|v| (*v - 1.5).abs() < 1e-15));
        assert_eq!(tape.value(u).shape(), &[2, 8, 12]);
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);
        let zw = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t(&[2], &[4.0, -1.0]));
        let y = tape.dense(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -1.0]);
        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_sigmoid_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3], 0.4));
        let p = tape.softmax(x).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx), tape.value(x));
        let prod = tape.mul(x, sx).unwrap();
        let s = tape.sum(prod);
        let s2 = tape.sum(sx);
        let total = tape.add(s, s2).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(tape.grad(sx).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(Error::BackwardTwice));
    }

    #[test]
    fn unreachable_parameter_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let unused = tape.param(Tensor::full(&[3], 1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).data(), &[0.0; 3]);
    }
}
