use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{conv, sample, strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Sigmoid,
    Sqrt,
    Clamp(f64, f64),
    Scale(f64),
    Offset(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: Binary, lhs: Var, rhs: Var },
    Unary { kind: Unary, input: Var },
    Reduce { input: Var, op: ReduceOp, out_index: Vec<usize>, counts: Vec<usize>, argmax: Vec<usize> },
    Conv2d { input: Var, kernel: Var, geom: conv::ConvGeometry },
    ChannelBias { input: Var, bias: Var },
    Sample { input: Var, coords: Vec<f64> },
    Permute { input: Var, axes: Vec<usize> },
    Reshape { input: Var },
    Gather { input: Var, indices: Vec<usize> },
    BceWithLogits { input: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order, which is also a topological order:
/// a node can only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Only leaves created with `requires_grad` (and values
    /// derived from them) take part in backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, args: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Usage(format!("{op:?} takes {arity} argument(s), got {}", args.len())));
        }
        match op {
            ElementwiseOp::Add => self.add(args[0], args[1]),
            ElementwiseOp::Sub => self.sub(args[0], args[1]),
            ElementwiseOp::Mul => self.mul(args[0], args[1]),
            ElementwiseOp::Relu => Ok(self.relu(args[0])),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(args[0])),
            ElementwiseOp::Sqrt => Ok(self.sqrt(args[0])),
            ElementwiseOp::Clamp { lo, hi } => Ok(self.clamp(args[0], lo, hi)),
        }
    }

    fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if a.shape() == b.shape() {
            a.zip_map(b, f)?
        } else if b.is_scalar() {
            let y = b.item();
            a.map(|x| f(x, y))
        } else if a.is_scalar() {
            let x = a.item();
            b.map(|y| f(x, y))
        } else {
            return Err(Error::Config(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        };
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(value, Op::Binary { kind, lhs, rhs }, rg))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Mul, lhs, rhs)
    }

    fn unary(&mut self, kind: Unary, input: Var) -> Var {
        let value = self.value(input).map(|x| match kind {
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => libm::sqrt(x),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Scale(s) => x * s,
            Unary::Offset(s) => x + s,
        });
        let rg = self.rg(&[input]);
        self.push(value, Op::Unary { kind, input }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(Unary::Scale(factor), x)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(Unary::Offset(offset), x)
    }

    // ---- reductions --------------------------------------------------

    /// Reduces over `axes`, removing them from the shape. An empty `axes`
    /// list reduces over every axis.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(x);
        let shape = input.shape();
        let rank = shape.len();
        let all_axes: Vec<usize> = if axes.is_empty() { (0..rank).collect() } else { axes.to_vec() };
        let mut reduced = vec![false; rank];
        for &a in &all_axes {
            if a >= rank || reduced[a] {
                return Err(Error::Config(format!("invalid reduction axes {axes:?} for shape {shape:?}")));
            }
            reduced[a] = true;
        }
        if input.numel() == 0 {
            return Err(Error::Domain(format!("empty reduction over shape {shape:?}")));
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_strides = strides_of(&out_shape);
        let out_len: usize = out_shape.iter().product();

        let mut out_index = Vec::with_capacity(input.numel());
        let mut counter = vec![0usize; rank];
        for _ in 0..input.numel() {
            let mut o = 0;
            let mut k = 0;
            for ax in 0..rank {
                if !reduced[ax] {
                    o += counter[ax] * out_strides[k];
                    k += 1;
                }
            }
            out_index.push(o);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }

        let data = input.data();
        let mut counts = vec![0usize; out_len];
        let mut out = vec![0.0; out_len];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (i, &o) in out_index.iter().enumerate() {
                    out[o] += data[i];
                    counts[o] += 1;
                }
                if op == ReduceOp::Mean {
                    for (v, &c) in out.iter_mut().zip(&counts) {
                        *v /= c as f64;
                    }
                }
            }
            ReduceOp::Max => {
                argmax = vec![usize::MAX; out_len];
                for (i, &o) in out_index.iter().enumerate() {
                    counts[o] += 1;
                    // strict comparison keeps the lowest flat index on ties
                    if argmax[o] == usize::MAX || data[i] > out[o] {
                        out[o] = data[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reduce { input: x, op, out_index, counts, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, &[])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, &[])
    }

    pub fn max(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, &[])
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { input: x }, rg))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(x);
        let rank = input.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::Config(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let in_strides = input.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| input.shape()[a]).collect();
        let src = permute_sources(&out_shape, axes, &in_strides);
        let data: Vec<f64> = src.iter().map(|&s| input.data()[s]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute { input: x, axes: axes.to_vec() }, rg))
    }

    /// Picks flat elements of `x` into a 1-d tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let input = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= input.numel()) {
            return Err(Error::Config(format!("gather index {bad} out of range {}", input.numel())));
        }
        let data: Vec<f64> = indices.iter().map(|&i| input.data()[i]).collect();
        let value = Tensor::new(&[indices.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { input: x, indices: indices.to_vec() }, rg))
    }

    // ---- image ops -----------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::geometry(self.shape(input), self.shape(kernel), stride, pad)?;
        let value = conv::forward(self.value(input), self.value(kernel), &geom);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, H, W]` input.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || self.value(bias).numel() != shape[1] {
            return Err(Error::Config(format!(
                "channel bias {:?} does not fit input {:?}",
                self.shape(bias),
                shape
            )));
        }
        let plane = shape[2] * shape[3];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(input).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / plane) % shape[1]];
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    /// Bilinear sampling of `input: [C, H, W]` at a normalized `[H', W', 2]`
    /// grid of `(x, y)` pairs in `[-1, 1]`. Samples outside the image read zero.
    pub fn bilinear_sample(&mut self, input: Var, grid: &Tensor) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let gs = grid.shape();
        if shape.len() != 3 || gs.len() != 3 || gs[2] != 2 {
            return Err(Error::Config(format!(
                "bilinear_sample expects [C,H,W] input and [H',W',2] grid, got {shape:?} and {gs:?}"
            )));
        }
        let coords: Vec<f64> = grid
            .data()
            .chunks_exact(2)
            .flat_map(|p| [sample::normalized_to_pixel(p[0], shape[2]), sample::normalized_to_pixel(p[1], shape[1])])
            .collect();
        self.sample_pixels(input, coords, gs[0], gs[1])
    }

    /// Bilinear sampling at explicit pixel coordinates (interleaved `x, y`;
    /// integer values hit pixel centres). Non-finite coordinates read zero.
    pub fn sample_pixels(&mut self, input: Var, coords: Vec<f64>, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() != 3 || coords.len() != out_h * out_w * 2 {
            return Err(Error::Config(format!(
                "sample_pixels expects [C,H,W] input and {} coordinates, got {:?} and {}",
                out_h * out_w * 2,
                shape,
                coords.len()
            )));
        }
        let value = sample::forward(self.value(input), &coords, out_h, out_w);
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Sample { input, coords }, rg))
    }

    // ---- losses --------------------------------------------------------

    /// Elementwise numerically stable binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let input = self.value(logits);
        if input.numel() != targets.len() {
            return Err(Error::Config(format!(
                "bce targets have {} values for {} logits",
                targets.len(),
                input.numel()
            )));
        }
        let data: Vec<f64> = input
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
            .collect();
        let value = Tensor::new(input.shape(), data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceWithLogits { input: logits, targets: targets.to_vec() }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d(loss)/d(v) into every participating node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            self.propagate(id, &g, &mut pending);
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let a = &nodes[lhs.0].value;
                let b = &nodes[rhs.0].value;
                let n = node.value.numel();
                let ai = |i: usize| if a.numel() == n { i } else { 0 };
                let bi = |i: usize| if b.numel() == n { i } else { 0 };
                if wants(lhs) {
                    accumulate(pending, *lhs, a.numel(), |acc| {
                        for i in 0..n {
                            acc[ai(i)] += match kind {
                                Binary::Add | Binary::Sub => g[i],
                                Binary::Mul => g[i] * b.data()[bi(i)],
                            };
                        }
                    });
                }
                if wants(rhs) {
                    accumulate(pending, *rhs, b.numel(), |acc| {
                        for i in 0..n {
                            acc[bi(i)] += match kind {
                                Binary::Add => g[i],
                                Binary::Sub => -g[i],
                                Binary::Mul => g[i] * a.data()[ai(i)],
                            };
                        }
                    });
                }
            }
            Op::Unary { kind, input } => {
                if !wants(input) {
                    return;
                }
                let x = nodes[input.0].value.data();
                let y = node.value.data();
                accumulate(pending, *input, x.len(), |acc| {
                    for i in 0..x.len() {
                        acc[i] += g[i]
                            * match *kind {
                                Unary::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Sqrt => 0.5 / y[i],
                                Unary::Clamp(lo, hi) => {
                                    if x[i] >= lo && x[i] <= hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Scale(s) => s,
                                Unary::Offset(_) => 1.0,
                            };
                    }
                });
            }
            Op::Reduce { input, op, out_index, counts, argmax } => {
                if !wants(input) {
                    return;
                }
                let n = out_index.len();
                accumulate(pending, *input, n, |acc| match op {
                    ReduceOp::Sum => {
                        for (i, &o) in out_index.iter().enumerate() {
                            acc[i] += g[o];
                        }
                    }
                    ReduceOp::Mean => {
                        for (i, &o) in out_index.iter().enumerate() {
                            acc[i] += g[o] / counts[o] as f64;
                        }
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            acc[i] += g[o];
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gx, gw) = conv::backward(
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    g,
                    geom,
                    wants(input),
                    wants(kernel),
                );
                if let Some(gx) = gx {
                    add_into(pending, *input, gx);
                }
                if let Some(gw) = gw {
                    add_into(pending, *kernel, gw);
                }
            }
            Op::ChannelBias { input, bias } => {
                let shape = node.value.shape();
                if wants(input) {
                    add_into(pending, *input, g.to_vec());
                }
                if wants(bias) {
                    let plane = shape[2] * shape[3];
                    accumulate(pending, *bias, shape[1], |acc| {
                        for (i, &gi) in g.iter().enumerate() {
                            acc[(i / plane) % shape[1]] += gi;
                        }
                    });
                }
            }
            Op::Sample { input, coords } => {
                if wants(input) {
                    let gx = sample::backward(nodes[input.0].value.shape(), coords, g);
                    add_into(pending, *input, gx);
                }
            }
            Op::Permute { input, axes } => {
                if !wants(input) {
                    return;
                }
                let in_value = &nodes[input.0].value;
                let src = permute_sources(node.value.shape(), axes, &in_value.strides());
                accumulate(pending, *input, in_value.numel(), |acc| {
                    for (o, &s) in src.iter().enumerate() {
                        acc[s] += g[o];
                    }
                });
            }
            Op::Reshape { input } => {
                if wants(input) {
                    add_into(pending, *input, g.to_vec());
                }
            }
            Op::Gather { input, indices } => {
                if wants(input) {
                    accumulate(pending, *input, nodes[input.0].value.numel(), |acc| {
                        for (o, &i) in indices.iter().enumerate() {
                            acc[i] += g[o];
                        }
                    });
                }
            }
            Op::BceWithLogits { input, targets } => {
                if wants(input) {
                    let z = nodes[input.0].value.data();
                    accumulate(pending, *input, z.len(), |acc| {
                        for i in 0..z.len() {
                            acc[i] += g[i] * (sigmoid(z[i]) - targets[i]);
                        }
                    });
                }
            }
        }
    }
}

/// For each output flat index of a permutation, the input flat index it reads.
fn permute_sources(out_shape: &[usize], axes: &[usize], in_strides: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut src = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        src.push(counter.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    src
}

fn accumulate(pending: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = pending[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(pending: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut pending[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
