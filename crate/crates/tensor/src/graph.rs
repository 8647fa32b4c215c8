//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application as a node holding its
//! forward value. Nodes are appended in evaluation order, so a single reverse
//! sweep over the tape from the loss node visits every node after all of its
//! consumers. Gradients are only propagated through nodes that transitively
//! depend on a parameter leaf.

use crate::error::{check_dim, Result, TensorError};
use crate::kernels::conv::{col2im, gemm, im2col, ConvGeom};
use crate::kernels::sample::{
    bilinear_taps, pool_plane, pool_plane_backward, pooled_len, resize_plane,
    resize_plane_backward,
};
use crate::tensor::{numel, Shape, Tensor};

/// Smallest magnitude a divisor is allowed to take.
pub const DIV_EPS: f32 = 1e-6;
/// Sigmoid outputs are kept inside `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
pub const SIGMOID_EPS: f32 = 6e-8;
const LOG_FLOOR: f32 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    LeakyRelu(f32),
    Sigmoid,
    Log,
    Pow(f32),
    Abs,
    AddScalar(f32),
    MulScalar(f32),
    /// `s - x`
    RSubScalar(f32),
    Clamp(f32, f32),
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Log => "log",
            UnaryOp::Pow(_) => "pow",
            UnaryOp::Abs => "abs",
            UnaryOp::AddScalar(_) => "add_scalar",
            UnaryOp::MulScalar(_) => "mul_scalar",
            UnaryOp::RSubScalar(_) => "rsub_scalar",
            UnaryOp::Clamp(..) => "clamp",
        }
    }

    #[inline]
    fn forward(self, x: f32) -> f32 {
        match self {
            UnaryOp::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryOp::Sigmoid => {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
            }
            UnaryOp::Log => x.max(LOG_FLOOR).ln(),
            UnaryOp::Pow(p) => x.powf(p),
            UnaryOp::Abs => x.abs(),
            UnaryOp::AddScalar(s) => x + s,
            UnaryOp::MulScalar(s) => x * s,
            UnaryOp::RSubScalar(s) => s - x,
            UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Local derivative given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Log => {
                if x >= LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            UnaryOp::Pow(p) => p * x.powf(p - 1.0),
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::AddScalar(_) => 1.0,
            UnaryOp::MulScalar(s) => s,
            UnaryOp::RSubScalar(_) => -1.0,
            UnaryOp::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        /// Column matrices of every batch item, kept for the weight gradient.
        cols: Vec<f32>,
    },
    Resize {
        input: Var,
    },
    AvgPool2 {
        input: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: UnaryOp,
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Crop {
        input: Var,
    },
    DiffX {
        input: Var,
    },
    DiffY {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. One graph per forward/backward pass; graphs are cheap
/// to create and are not shared between threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable the per-operator NaN/Inf assertion.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    // ------------------------------------------------------------------
    // Operators
    // ------------------------------------------------------------------

    /// 2-D convolution. `weight` is `(out_c, in_c, k, k)` with odd `k`,
    /// `bias` is `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, in_c, in_h, in_w] = self.shape(input);
        let [out_c, w_in_c, k, kw] = self.shape(weight);
        check_dim(OP, "weight in_channels", in_c, w_in_c)?;
        check_dim(OP, "kernel width", k, kw)?;
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("kernel size must be odd, got {k}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "stride must be positive".into(),
            });
        }
        let bshape = self.shape(bias);
        check_dim(OP, "bias channels", out_c, bshape[1])?;
        check_dim(OP, "bias size", out_c, numel(bshape))?;
        if in_h + 2 * padding < k || in_w + 2 * padding < k {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("input {in_h}x{in_w} smaller than kernel {k} after padding"),
            });
        }
        let g = ConvGeom {
            in_c,
            in_h,
            in_w,
            k,
            stride,
            pad: padding,
            out_h: (in_h + 2 * padding - k) / stride + 1,
            out_w: (in_w + 2 * padding - k) / stride + 1,
        };
        let (rows, p) = (g.col_rows(), g.col_cols());
        let pointwise = g.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; n * rows * p]
        };
        let mut out = vec![0.0f32; n * out_c * p];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = self.value(bias).data();
            for ni in 0..n {
                let img = &x[ni * in_c * in_h * in_w..(ni + 1) * in_c * in_h * in_w];
                let col: &[f32] = if pointwise {
                    img
                } else {
                    let c = &mut cols[ni * rows * p..(ni + 1) * rows * p];
                    im2col(img, &g, c);
                    c
                };
                let o = &mut out[ni * out_c * p..(ni + 1) * out_c * p];
                for (oc, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.fill(b[oc]);
                }
                gemm(out_c, rows, p, w, false, col, false, 1.0, o);
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        let value = Tensor::new([n, out_c, g.out_h, g.out_w], out)?;
        self.push_checked(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
            rg,
        )
    }

    /// Bilinear resize with the align-corners = false convention.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "resize_bilinear";
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("target size {out_h}x{out_w} must be non-zero"),
            });
        }
        let value = resize_tensor(self.value(input), out_h, out_w)?;
        let rg = self.requires_grad(input);
        self.push_checked(OP, value, Op::Resize { input }, rg)
    }

    /// 2x2 mean pooling; odd extents replicate their last row/column.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let value = avg_pool2_tensor(self.value(input))?;
        let rg = self.requires_grad(input);
        self.push_checked("avg_pool2", value, Op::AvgPool2 { input }, rg)
    }

    /// Elementwise binary operator with broadcasting over singleton dims.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = op.name();
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0f32; numel(out_shape)];
        let f = |x: f32, y: f32| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / clamp_divisor(y),
        };
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(va.data()).zip(vb.data()) {
                *o = f(x, y);
            }
        } else {
            for_each_broadcast(out_shape, va.shape(), vb.shape(), |oi, ai, bi| {
                out[oi] = f(va.data()[ai], vb.data()[bi]);
            });
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::new(out_shape, out)?;
        self.push_checked(name, value, Op::Binary { op, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a / b`, with `|b|` clamped to at least [`DIV_EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| op.forward(x));
        let rg = self.requires_grad(input);
        self.push_checked(op.name(), value, Op::Unary { op, input }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn pow(&mut self, x: Var, exponent: f32) -> Result<Var> {
        self.unary(UnaryOp::Pow(exponent), x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(s), x)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        self.unary(UnaryOp::MulScalar(s), x)
    }

    /// `s - x`
    pub fn rsub_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        self.unary(UnaryOp::RSubScalar(s), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary(UnaryOp::Clamp(lo, hi), x)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&values)?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_checked(
            "concat_channels",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Keep the top-left `h x w` window.
    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, ih, iw] = self.shape(input);
        if h > ih || w > iw {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                reason: format!("crop {h}x{w} exceeds input {ih}x{iw}"),
            });
        }
        let src = self.value(input);
        let value = Tensor::from_fn([n, c, h, w], |ni, ci, y, x| src.get(ni, ci, y, x));
        let rg = self.requires_grad(input);
        self.push_checked("crop", value, Op::Crop { input }, rg)
    }

    /// Forward difference along x: `out[.., y, x] = in[.., y, x + 1] - in[.., y, x]`.
    pub fn diff_x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(input);
        let src = self.value(input);
        let value = Tensor::from_fn([n, c, h, w.saturating_sub(1)], |ni, ci, y, x| {
            src.get(ni, ci, y, x + 1) - src.get(ni, ci, y, x)
        });
        let rg = self.requires_grad(input);
        self.push_checked("diff_x", value, Op::DiffX { input }, rg)
    }

    /// Forward difference along y.
    pub fn diff_y(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(input);
        let src = self.value(input);
        let value = Tensor::from_fn([n, c, h.saturating_sub(1), w], |ni, ci, y, x| {
            src.get(ni, ci, y + 1, x) - src.get(ni, ci, y, x)
        });
        let rg = self.requires_grad(input);
        self.push_checked("diff_y", value, Op::DiffY { input }, rg)
    }

    /// Sum of all elements (accumulated in f64); empty tensors sum to 0.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(input);
        self.push_checked("sum", Tensor::scalar(s as f32), Op::Sum { input }, rg)
    }

    /// Mean of all elements (accumulated in f64).
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "mean of an empty tensor".into(),
            });
        }
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel() as f64;
        let rg = self.requires_grad(input);
        self.push_checked("mean", Tensor::scalar(m as f32), Op::Mean { input }, rg)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Back-propagate from a single-element `loss` node. Gradients of every
    /// node that requires them are retained and readable with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let [n, in_c, in_h, in_w] = x.shape();
                let [out_c, _, k, _] = w.shape();
                let geom = ConvGeom {
                    in_c,
                    in_h,
                    in_w,
                    k,
                    stride: *stride,
                    pad: *padding,
                    out_h: g.height(),
                    out_w: g.width(),
                };
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let pointwise = geom.is_pointwise();
                let gd = g.data();
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0f32; out_c];
                    for ni in 0..n {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let start = (ni * out_c + oc) * p;
                            *acc += gd[start..start + p].iter().sum::<f32>();
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(self.shape(*bias), gb)?);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0f32; out_c * rows];
                    for ni in 0..n {
                        let go = &gd[ni * out_c * p..(ni + 1) * out_c * p];
                        let col: &[f32] = if pointwise {
                            &x.data()[ni * in_c * in_h * in_w..(ni + 1) * in_c * in_h * in_w]
                        } else {
                            &cols[ni * rows * p..(ni + 1) * rows * p]
                        };
                        gemm(out_c, p, rows, go, false, col, true, 1.0, &mut gw);
                    }
                    accumulate(grads, *weight, Tensor::new(w.shape(), gw)?);
                }
                if self.requires_grad(*input) {
                    let mut gx = vec![0.0f32; x.numel()];
                    let mut gcol = vec![0.0f32; rows * p];
                    for ni in 0..n {
                        let go = &gd[ni * out_c * p..(ni + 1) * out_c * p];
                        let dst = &mut gx[ni * in_c * in_h * in_w..(ni + 1) * in_c * in_h * in_w];
                        if pointwise {
                            gemm(rows, out_c, p, w.data(), true, go, false, 0.0, dst);
                        } else {
                            gemm(rows, out_c, p, w.data(), true, go, false, 0.0, &mut gcol);
                            col2im(&gcol, &geom, dst);
                        }
                    }
                    accumulate(grads, *input, Tensor::new(x.shape(), gx)?);
                }
            }
            Op::Resize { input } => {
                if self.requires_grad(*input) {
                    let [n, c, ih, iw] = self.shape(*input);
                    let ys = bilinear_taps(ih, g.height());
                    let xs = bilinear_taps(iw, g.width());
                    let mut gx = vec![0.0f32; n * c * ih * iw];
                    for nc in 0..n * c {
                        let go = &g.data()[nc * g.height() * g.width()..(nc + 1) * g.height() * g.width()];
                        resize_plane_backward(go, iw, &ys, &xs, &mut gx[nc * ih * iw..(nc + 1) * ih * iw]);
                    }
                    accumulate(grads, *input, Tensor::new([n, c, ih, iw], gx)?);
                }
            }
            Op::AvgPool2 { input } => {
                if self.requires_grad(*input) {
                    let [n, c, ih, iw] = self.shape(*input);
                    let (oh, ow) = (pooled_len(ih), pooled_len(iw));
                    let mut gx = vec![0.0f32; n * c * ih * iw];
                    for nc in 0..n * c {
                        pool_plane_backward(
                            &g.data()[nc * oh * ow..(nc + 1) * oh * ow],
                            ih,
                            iw,
                            &mut gx[nc * ih * iw..(nc + 1) * ih * iw],
                        );
                    }
                    accumulate(grads, *input, Tensor::new([n, c, ih, iw], gx)?);
                }
            }
            Op::Binary { op, a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                let mut ga = need_a.then(|| vec![0.0f32; va.numel()]);
                let mut gb = need_b.then(|| vec![0.0f32; vb.numel()]);
                let mut step = |oi: usize, ai: usize, bi: usize| {
                    let go = g.data()[oi];
                    let (x, y) = (va.data()[ai], vb.data()[bi]);
                    let (da, db) = match op {
                        BinaryOp::Add => (go, go),
                        BinaryOp::Sub => (go, -go),
                        BinaryOp::Mul => (go * y, go * x),
                        BinaryOp::Div => {
                            let d = clamp_divisor(y);
                            let db = if y.abs() >= DIV_EPS { -go * x / (d * d) } else { 0.0 };
                            (go / d, db)
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ai] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bi] += db;
                    }
                };
                if va.shape() == vb.shape() {
                    for idx in 0..va.numel() {
                        step(idx, idx, idx);
                    }
                } else {
                    for_each_broadcast(g.shape(), va.shape(), vb.shape(), step);
                }
                if let Some(ga) = ga {
                    accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
                }
            }
            Op::Unary { op, input } => {
                if self.requires_grad(*input) {
                    let x = self.value(*input);
                    let y = &node.value;
                    let gx: Vec<f32> = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&xv, &yv), &gv)| gv * op.derivative(xv, yv))
                        .collect();
                    accumulate(grads, *input, Tensor::new(x.shape(), gx)?);
                }
            }
            Op::Concat { inputs } => {
                let [n, _, h, w] = g.shape();
                let hw = h * w;
                let total_c = g.channels();
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut gx = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let start = (ni * total_c + c_off) * hw;
                            gx.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        accumulate(grads, v, Tensor::new([n, c, h, w], gx)?);
                    }
                    c_off += c;
                }
            }
            Op::Crop { input } => {
                if self.requires_grad(*input) {
                    let shape = self.shape(*input);
                    let mut gx = Tensor::zeros(shape);
                    let [n, c, h, w] = g.shape();
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    gx.set(ni, ci, y, x, g.get(ni, ci, y, x));
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::DiffX { input } => {
                if self.requires_grad(*input) {
                    let mut gx = Tensor::zeros(self.shape(*input));
                    let [n, c, h, w] = g.shape();
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let v = g.get(ni, ci, y, x);
                                    let o1 = gx.offset(ni, ci, y, x + 1);
                                    let o0 = gx.offset(ni, ci, y, x);
                                    gx.data_mut()[o1] += v;
                                    gx.data_mut()[o0] -= v;
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::DiffY { input } => {
                if self.requires_grad(*input) {
                    let mut gx = Tensor::zeros(self.shape(*input));
                    let [n, c, h, w] = g.shape();
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let v = g.get(ni, ci, y, x);
                                    let o1 = gx.offset(ni, ci, y + 1, x);
                                    let o0 = gx.offset(ni, ci, y, x);
                                    gx.data_mut()[o1] += v;
                                    gx.data_mut()[o0] -= v;
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::Sum { input } => {
                if self.requires_grad(*input) {
                    accumulate(grads, *input, Tensor::full(self.shape(*input), g.item()));
                }
            }
            Op::Mean { input } => {
                if self.requires_grad(*input) {
                    let shape = self.shape(*input);
                    let scale = g.item() / numel(shape) as f32;
                    accumulate(grads, *input, Tensor::full(shape, scale));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn clamp_divisor(y: f32) -> f32 {
    if y >= 0.0 {
        y.max(DIV_EPS)
    } else {
        y.min(-DIV_EPS)
    }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    const DIMS: [&str; 4] = ["batch", "channels", "height", "width"];
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    dim: DIMS[d],
                    expected: x,
                    actual: y,
                })
            }
        };
    }
    Ok(out)
}

fn strides_for(shape: Shape, out: Shape) -> [usize; 4] {
    let full = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let mut oi = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let abase = n * sa[0] + c * sa[1] + y * sa[2];
                let bbase = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(oi, abase + x * sa[3], bbase + x * sb[3]);
                    oi += 1;
                }
            }
        }
    }
}

/// Non-differentiable bilinear resize of a plain tensor (align-corners = false).
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = t.shape();
    if out_h == 0 || out_w == 0 || ih == 0 || iw == 0 {
        return Err(TensorError::InvalidArgument {
            op: "resize_bilinear",
            reason: format!("cannot resize {ih}x{iw} to {out_h}x{out_w}"),
        });
    }
    if (ih, iw) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let ys = bilinear_taps(ih, out_h);
    let xs = bilinear_taps(iw, out_w);
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    for nc in 0..n * c {
        resize_plane(
            &t.data()[nc * ih * iw..(nc + 1) * ih * iw],
            iw,
            &ys,
            &xs,
            &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w],
        );
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Non-differentiable 2x2 mean pooling with replicate padding of odd extents.
pub fn avg_pool2_tensor(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2",
            reason: "empty spatial extent".into(),
        });
    }
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        pool_plane(
            &t.data()[nc * h * w..(nc + 1) * h * w],
            h,
            w,
            &mut out[nc * oh * ow..(nc + 1) * oh * ow],
        );
    }
    Tensor::new([n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_the_neighbourhood() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros([1, 1, 1, 1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let src = Tensor::from_fn([2, 1, 4, 5], |n, _, y, x| (n * 20 + y * 5 + x) as f32 * 0.1);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.set(0, 0, 1, 1, 1.0);
        let x = g.input(src.clone());
        let w = g.input(k);
        let b = g.input(Tensor::zeros([1, 1, 1, 1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &src);
    }

    #[test]
    fn strided_conv_output_arithmetic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 2, 9, 8]));
        let w = g.input(Tensor::zeros([4, 2, 3, 3]));
        let b = g.input(Tensor::zeros([1, 4, 1, 1]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), [1, 4, 5, 4]);
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 8, 8]));
        let w = g.input(Tensor::zeros([4, 2, 3, 3]));
        let b = g.input(Tensor::zeros([1, 4, 1, 1]));
        match g.conv2d(x, w, b, 1, 1) {
            Err(TensorError::ShapeMismatch { dim, expected, actual, .. }) => {
                assert_eq!(dim, "weight in_channels");
                assert_eq!((expected, actual), (3, 2));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let w_even = g.input(Tensor::zeros([4, 3, 2, 2]));
        assert!(g.conv2d(x, w_even, b, 1, 1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut g = Graph::new();
        let src = Tensor::from_fn([1, 2, 3, 5], |_, c, y, x| (c * 15 + y * 5 + x) as f32);
        let x = g.input(src.clone());
        let same = g.resize_bilinear(x, 3, 5).unwrap();
        assert_eq!(g.value(same), &src);
        let k = g.input(Tensor::full([1, 1, 4, 4], 0.7));
        for (h, w) in [(1, 1), (3, 7), (9, 2)] {
            let r = g.resize_bilinear(k, h, w).unwrap();
            assert!(g.value(r).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
        assert!(g.resize_bilinear(k, 0, 3).is_err());
    }

    #[test]
    fn resize_2x2_to_4x4_corner_weights() {
        // Hand-evaluated: output (y, x) samples source (y/2 - 0.25, x/2 - 0.25),
        // clamped at 0. The top-left 2x2 block therefore samples
        // (0,0), (0,0.25), (0.25,0), (0.25,0.25) of [[0,1],[2,3]].
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.resize_bilinear(x, 4, 4).unwrap();
        let out = g.value(y);
        assert!((out.get(0, 0, 0, 0) - 0.0).abs() < 1e-6);
        assert!((out.get(0, 0, 0, 1) - 0.25).abs() < 1e-6);
        assert!((out.get(0, 0, 1, 0) - 0.5).abs() < 1e-6);
        assert!((out.get(0, 0, 1, 1) - 0.75).abs() < 1e-6);
        assert!((out.get(0, 0, 3, 3) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        let ones = g.input(Tensor::full([1, 1, 2, 2], 1.0));
        let p = g.avg_pool2(ones).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
        let x = g.input(Tensor::new([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        // Odd extents replicate the last row/column.
        let odd = g.input(Tensor::new([1, 1, 1, 3], vec![1.0, 3.0, 5.0]).unwrap());
        let p = g.avg_pool2(odd).unwrap();
        assert_eq!(g.value(p).shape(), [1, 1, 1, 2]);
        assert_eq!(g.value(p).data(), &[2.0, 5.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let m = g.input(Tensor::scalar(-1.0));
        let l = g.leaky_relu(m, 0.1).unwrap();
        assert!((g.value(l).item() + 0.1).abs() < 1e-7);
        let big = g.input(Tensor::new([1, 1, 1, 2], vec![80.0, -80.0]).unwrap());
        let s = g.sigmoid(big).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn division_clamps_small_denominators() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::scalar(0.0));
        let q = g.div(a, b).unwrap();
        assert_eq!(g.value(q).item(), 1.0 / DIV_EPS);
    }

    #[test]
    fn broadcast_over_singleton_channel() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn([2, 3, 2, 2], |n, c, y, x| (n + c + y + x) as f32));
        let b = g.param(Tensor::full([2, 1, 2, 2], 2.0));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.shape(p), [2, 3, 2, 2]);
        assert_eq!(g.value(p).get(1, 2, 1, 1), 10.0);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        // d/db sums a over the broadcast channel axis.
        assert_eq!(g.grad(b).unwrap().get(0, 0, 0, 0), 0.0 + 1.0 + 2.0);
        let bad = g.input(Tensor::zeros([2, 2, 2, 2]));
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-1.0));
        match g.pow(x, 0.5) {
            Err(TensorError::NonFinite { op }) => assert_eq!(op, "pow"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.pow(x, 2.0).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }
}
