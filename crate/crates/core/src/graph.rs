//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Nodes
//! only ever reference earlier nodes, so the tape order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for fault injection in gradient-check negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv2d,
    ChannelBias,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    MaxPool2d,
    Sum,
    SumAxis0,
    SumAxis1,
    MaxAxis1,
    Dot,
    Slice,
    Concat,
    Reshape,
    NegLogPick,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        Some(match name {
            "matmul" => MatMul,
            "conv2d" => Conv2d,
            "channel_bias" => ChannelBias,
            "add" => Add,
            "mul" => Mul,
            "scale" => Scale,
            "sigmoid" => Sigmoid,
            "tanh" => Tanh,
            "relu" => Relu,
            "softmax" => Softmax,
            "maxpool2d" => MaxPool2d,
            "sum" => Sum,
            "sum_axis0" => SumAxis0,
            "sum_axis1" => SumAxis1,
            "max_axis1" => MaxAxis1,
            "dot" => Dot,
            "slice" => Slice,
            "concat" => Concat,
            "reshape" => Reshape,
            "neg_log_pick" => NegLogPick,
            _ => return None,
        })
    }
}

/// Geometry of a 2-D convolution, fixed at forward time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let &[c, h, w] = input else {
            return dim_err(format!("conv2d input must be C×H×W, got {input:?}"));
        };
        let &[co, ci, kh, kw] = kernels else {
            return dim_err(format!("conv2d kernels must be Co×Ci×k×k, got {kernels:?}"));
        };
        if ci != c {
            return dim_err(format!("conv2d expects {ci} input channels, got {c}"));
        }
        if kh != kw {
            return dim_err("conv2d kernels must be square");
        }
        if stride == 0 {
            return dim_err("conv2d stride must be >= 1");
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return dim_err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: co,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `(C·k·k) × (H'·W')` column matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let mut cols = vec![0.0; self.patch_len() * plane];
        let k = self.kernel;
        for c in 0..self.in_channels {
            let src = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * self.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let plane = self.out_plane();
        let k = self.kernel;
        for c in 0..self.in_channels {
            let dst = &mut out[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[iy as usize * self.in_w + ix as usize] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, kernels: Var, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias { input: Var, bias: Var, plane: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Sum(Var),
    SumAxis0 { input: Var, rows: usize, cols: usize },
    SumAxis1 { input: Var, rows: usize, cols: usize },
    MaxAxis1 { input: Var, cols: usize, argmax: Vec<usize> },
    Dot(Var, Var),
    Slice { input: Var, start: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    NegLogPick { input: Var, index: usize, floor: f64 },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelBias { .. } => OpKind::ChannelBias,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAxis0 { .. } => OpKind::SumAxis0,
            Op::SumAxis1 { .. } => OpKind::SumAxis1,
            Op::MaxAxis1 { .. } => OpKind::MaxAxis1,
            Op::Dot(..) => OpKind::Dot,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat(_) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::NegLogPick { .. } => OpKind::NegLogPick,
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

/// A recorded computation. Single-threaded; build one per example.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    fault: Option<OpKind>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn slot_mut(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    /// Enables or disables the NaN/Inf assertion run after every op.
    pub fn set_finite_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Deliberately corrupts the backward rule of one op kind (scaled by 1.5).
    /// Only meant for negative-control gradient checks.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.check_finite {
            assert!(
                value.is_finite(),
                "non-finite output from {:?}",
                op.kind()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf. Its gradient accumulates across calls to [`Graph::backward`].
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return dim_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        };
        if k != k2 {
            return dim_err(format!("matmul inner dims differ: {sa:?} · {sb:?}"));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `x[n] · w[n×m] → [m]`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let row = self.reshape(x, &[1, n])?;
        let out = self.matmul(row, w)?;
        let m = self.value(out).numel();
        self.reshape(out, &[m])
    }

    /// Cross-correlation of a `C×H×W` input with `Co×C×k×k` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernels), stride, pad)?;
        let cols = geom.im2col(self.data(input));
        let plane = geom.out_plane();
        let patch = geom.patch_len();
        let kdata = self.data(kernels);
        let mut out = vec![0.0; geom.out_channels * plane];
        for co in 0..geom.out_channels {
            let dst = &mut out[co * plane..(co + 1) * plane];
            for r in 0..patch {
                let w = kdata[co * patch + r];
                if w == 0.0 {
                    continue;
                }
                let src = &cols[r * plane..(r + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            Tensor::new(&[geom.out_channels, geom.out_h, geom.out_w], out)?,
            Op::Conv2d {
                input,
                kernels,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Adds a per-channel bias to a `C×H×W` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let c = shape[0];
        if self.value(bias).numel() != c {
            return dim_err(format!("bias of {} for {c} channels", self.value(bias).numel()));
        }
        let plane = self.value(input).numel() / c;
        let b = self.data(bias).to_vec();
        let mut out = self.data(input).to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[ch]);
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ChannelBias { input, bias, plane }, rg))
    }

    fn binary_shapes(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape(), out).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Dispatches one of the pointwise ops; `b` is required for binary ones.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| {
            b.ok_or_else(|| Error::Contract(format!("{op:?} needs two operands")))
        };
        match op {
            Elementwise::Add => self.add(a, need(b)?),
            Elementwise::Mul => self.mul(a, need(b)?),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Relu => Ok(self.relu(a)),
        }
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 1 {
            return dim_err(format!("softmax expects a vector, got {:?}", self.shape(a)));
        }
        let out = softmax(self.data(a));
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), rg))
    }

    /// Non-overlapping `size×size` max pooling over each channel of `C×H×W`.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return dim_err("max_pool2d expects C×H×W");
        };
        if size == 0 || size > h || size > w {
            return dim_err(format!("pool size {size} does not fit {h}×{w}"));
        }
        let (oh, ow) = (h / size, w / size);
        let data = self.data(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&[c, oh, ow], out)?,
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    fn as_matrix(&self, a: Var, name: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("{name} expects a matrix, got {:?}", self.shape(a))),
        }
    }

    /// Column sums of an `r×c` matrix → `[c]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a, "sum_axis0")?;
        let mut out = vec![0.0; cols];
        for row in self.data(a).chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumAxis0 { input: a, rows, cols }, rg))
    }

    /// Row sums of an `r×c` matrix → `[r]`.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a, "sum_axis1")?;
        let out = self.data(a).chunks(cols).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumAxis1 { input: a, rows, cols }, rg))
    }

    /// Row maxima of an `r×c` matrix → `[r]`.
    pub fn max_axis1(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.as_matrix(a, "max_axis1")?;
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for row in self.data(a).chunks(cols) {
            let j = crate::tensor::argmax(row);
            out.push(row[j]);
            argmax.push(j);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MaxAxis1 { input: a, cols, argmax }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return dim_err("dot: operand lengths differ");
        }
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Contiguous sub-range of a flattened tensor, returned as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if len == 0 || start + len > n {
            return dim_err(format!("slice {start}..{} out of {n}", start + len));
        }
        let out = self.data(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Slice { input: a, start }, rg))
    }

    /// Concatenates flattened operands into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of nothing");
        }
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `-ln(max(p[index], floor))`; the gradient vanishes where the floor is active.
    pub fn neg_log_pick(&mut self, probs: Var, index: usize, floor: f64) -> Result<Var> {
        let n = self.value(probs).numel();
        if index >= n {
            return Err(Error::Input(format!("index {index} out of range for {n} entries")));
        }
        let p = self.data(probs)[index].max(floor);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(-p.ln()),
            Op::NegLogPick { input: probs, index, floor },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.fault.is_some() && node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            if matches!(node.op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    // dA = dC · Bᵀ
                    let bd = self.data(b);
                    let ga = slot_mut(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let ad = self.data(a);
                    let gb = slot_mut(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, x)| *d += av * x);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernels, geom, cols } => {
                let plane = geom.out_plane();
                let patch = geom.patch_len();
                if wants(*kernels) {
                    let gk = slot_mut(&mut grads[kernels.0], geom.out_channels * patch);
                    for co in 0..geom.out_channels {
                        let grow = &g[co * plane..(co + 1) * plane];
                        for r in 0..patch {
                            let crow = &cols[r * plane..(r + 1) * plane];
                            gk[co * patch + r] +=
                                grow.iter().zip(crow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*input) {
                    let kd = self.data(*kernels);
                    let mut gcols = vec![0.0; patch * plane];
                    for co in 0..geom.out_channels {
                        let grow = &g[co * plane..(co + 1) * plane];
                        for r in 0..patch {
                            let w = kd[co * patch + r];
                            if w == 0.0 {
                                continue;
                            }
                            gcols[r * plane..(r + 1) * plane]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, x)| *d += w * x);
                        }
                    }
                    let n = geom.in_channels * geom.in_h * geom.in_w;
                    geom.col2im(&gcols, slot_mut(&mut grads[input.0], n));
                }
            }
            &Op::ChannelBias { input, bias, plane } => {
                if wants(input) {
                    accumulate(&mut grads[input.0], g);
                }
                if wants(bias) {
                    let gb: Vec<f64> = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads[bias.0], &gb);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            &Op::Scale(a, f) => {
                let d: Vec<f64> = g.iter().map(|x| x * f).collect();
                accumulate(&mut grads[a.0], &d);
            }
            &Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, s)| x * s * (1.0 - s)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            &Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(x, t)| x * (1.0 - t * t)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            &Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            &Op::Softmax(a) => {
                // J·g = s ⊙ (g − ⟨g, s⟩)
                let inner: f64 = g.iter().zip(out).map(|(x, s)| x * s).sum();
                let d: Vec<f64> = g.iter().zip(out).map(|(x, s)| s * (x - inner)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::MaxPool2d { input, argmax } => {
                let n = self.value(*input).numel();
                let gi = slot_mut(&mut grads[input.0], n);
                for (&src, x) in argmax.iter().zip(g) {
                    gi[src] += x;
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                let gi = slot_mut(&mut grads[a.0], n);
                gi.iter_mut().for_each(|v| *v += g[0]);
            }
            &Op::SumAxis0 { input, rows, cols } => {
                let gi = slot_mut(&mut grads[input.0], rows * cols);
                for row in gi.chunks_mut(cols) {
                    row.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            &Op::SumAxis1 { input, rows, cols } => {
                let gi = slot_mut(&mut grads[input.0], rows * cols);
                for (row, x) in gi.chunks_mut(cols).zip(g) {
                    row.iter_mut().for_each(|d| *d += x);
                }
            }
            Op::MaxAxis1 { input, cols, argmax } => {
                let n = self.value(*input).numel();
                let gi = slot_mut(&mut grads[input.0], n);
                for (r, (&j, x)) in argmax.iter().zip(g).enumerate() {
                    gi[r * cols + j] += x;
                }
            }
            &Op::Dot(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = self.data(b).iter().map(|y| y * g[0]).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = self.data(a).iter().map(|y| y * g[0]).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            &Op::Slice { input, start } => {
                let n = self.value(input).numel();
                let gi = slot_mut(&mut grads[input.0], n);
                gi[start..start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += x);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if wants(p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            &Op::NegLogPick { input, index, floor } => {
                let n = self.value(input).numel();
                let p = self.data(input)[index];
                let gi = slot_mut(&mut grads[input.0], n);
                if p > floor {
                    gi[index] -= g[0] / p;
                }
            }
        }
    }
}

/// Plain `A[m×k] · B[k×n]` product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            crow.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(c, b)| *c += av * b);
        }
    }
    c
}
