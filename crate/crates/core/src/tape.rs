//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends one node holding its output value and enough of its
//! inputs to replay the adjoint. [`Tape::backward`] walks the nodes in
//! reverse insertion order, so gradient accumulation order is fixed and
//! results are bitwise reproducible.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv3dGeom, ConvGeom};
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise vocabulary accepted by [`Tape::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

/// Discriminant of a recorded op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Conv2d,
    Concat,
    Slice,
    SpatialAverage,
    ChannelSum,
    Softmax,
    MatVec,
    ScaleColumn,
    AvgPool2,
    Stack,
    Conv3d,
    MeanLeading,
    CrossEntropy,
    Sum,
}

/// Deliberate corruption of one adjoint rule. Gradient checkers use it as a
/// negative control: the gradient sent to input `slot` of every `op` node is
/// multiplied by `factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub slot: usize,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, s: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        extra: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    SpatialAverage(Var),
    ChannelSum(Var),
    Softmax(Var),
    MatVec { mat: Var, vec: Var, transpose: bool },
    ScaleColumn { x: Var, theta: Var, col: usize },
    AvgPool2(Var),
    Stack(Vec<Var>),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: Conv3dGeom,
    },
    MeanLeading(Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, label: usize },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::SpatialAverage(_) => OpKind::SpatialAverage,
            Op::ChannelSum(_) => OpKind::ChannelSum,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MatVec { .. } => OpKind::MatVec,
            Op::ScaleColumn { .. } => OpKind::ScaleColumn,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::Stack(_) => OpKind::Stack,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::MeanLeading(_) => OpKind::MeanLeading,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<BackwardFault>,
    kink_margin: f64,
}

fn rank3(op: &'static str, s: Shape) -> Result<(usize, usize, usize)> {
    s.chw().ok_or_else(|| Error::BadShape {
        op,
        expected: "rank-3 [C x H x W]".to_string(),
        got: s,
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
            kink_margin: f64::INFINITY,
        }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance to a non-differentiable point seen so far: ReLU
    /// inputs near zero and argmax selections with a small top-two gap.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub(crate) fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` when
    /// `v` does not require grad or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- pointwise -------------------------------------------------------

    /// Elementwise op. Binary kinds take `b` of the same shape as `a` or a
    /// `[1 x H x W]` map broadcast over the channels of `a`.
    pub fn pointwise(&mut self, kind: Pointwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Pointwise::Sigmoid, _) => Ok(self.sigmoid(a)),
            (Pointwise::Tanh, _) => Ok(self.tanh(a)),
            (Pointwise::Relu, _) => Ok(self.relu(a)),
            (Pointwise::Add, Some(b)) => self.add(a, b),
            (Pointwise::Mul, Some(b)) => self.mul(a, b),
            (_, None) => Err(Error::BadShape {
                op: "pointwise",
                expected: "a second operand for a binary kind".to_string(),
                got: self.shape(a),
            }),
        }
    }

    fn broadcast_rule(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if let (Some((_, ha, wa)), Some((1, hb, wb))) = (sa.chw(), sb.chw()) {
            if ha == hb && wa == wb {
                return Ok(true);
            }
        }
        Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        })
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let broadcast = self.broadcast_rule(if mul { "mul" } else { "add" }, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if broadcast {
            let hw = db.len();
            da.chunks_exact(hw)
                .flat_map(|plane| {
                    plane
                        .iter()
                        .zip(db)
                        .map(move |(x, y)| if mul { x * y } else { x + y })
                })
                .collect()
        } else {
            da.iter()
                .zip(db)
                .map(|(x, y)| if mul { x * y } else { x + y })
                .collect()
        };
        let value = Tensor::from_parts(self.shape(a), out);
        let rg = self.rg(&[a, b]);
        let op = if mul {
            Op::Mul { a, b, broadcast }
        } else {
            Op::Add { a, b, broadcast }
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = Tensor::from_parts(
            self.shape(a),
            self.data(a).iter().map(|x| x * s).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, s }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = Tensor::from_parts(self.shape(a), self.data(a).iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.data(a).iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.note_kink(m);
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    // ---- convolution -----------------------------------------------------

    /// Same-padded 2-D cross-correlation of `input[C_in x H x W]` with
    /// `kernel[C_out x C_in x k x k]`, plus `bias[C_out]` and an optional
    /// per-position `extra_bias[C_out x H x W]`.
    pub fn conv2d_same(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        extra_bias: Option<Var>,
    ) -> Result<Var> {
        let (c_in, h, w) = rank3("conv2d_same", self.shape(input))?;
        let ks = self.shape(kernel);
        let (c_out, kc, k) = match *ks.dims() {
            [co, ci, ky, kx] if ky == kx => (co, ci, ky),
            _ => {
                return Err(Error::BadShape {
                    op: "conv2d_same",
                    expected: "square kernel [C_out x C_in x k x k]".to_string(),
                    got: ks,
                })
            }
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                left: self.shape(input),
                right: ks,
            });
        }
        if self.shape(bias).dims() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same bias",
                left: ks,
                right: self.shape(bias),
            });
        }
        if let Some(e) = extra_bias {
            if self.shape(e).dims() != [c_out, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_same extra_bias",
                    left: ks,
                    right: self.shape(e),
                });
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.data(input),
            self.data(kernel),
            self.data(bias),
            extra_bias.map(|e| self.data(e)),
            geom,
        );
        let mut inputs = vec![input, kernel, bias];
        inputs.extend(extra_bias);
        let rg = self.rg(&inputs);
        let cols = if rg && self.requires_grad(kernel) {
            cols
        } else {
            Vec::new()
        };
        let value = Tensor::from_parts(Shape::new(&[c_out, h, w])?, out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                extra: extra_bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Convolution of `input[T x C_in x H x W]` with
    /// `kernel[C_out x C_in x kt x k x k]`: valid in time, same-padded in
    /// space. Output is `[T-kt+1 x C_out x H x W]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input);
        let ks = self.shape(kernel);
        let (t, c_in, h, w) = match *is.dims() {
            [t, c, h, w] => (t, c, h, w),
            _ => {
                return Err(Error::BadShape {
                    op: "conv3d",
                    expected: "[T x C x H x W]".to_string(),
                    got: is,
                })
            }
        };
        let (c_out, kt, k) = match *ks.dims() {
            [co, ci, kt, ky, kx] if ci == c_in && ky == kx => (co, kt, ky),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv3d",
                    left: is,
                    right: ks,
                })
            }
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if kt == 0 || t < kt {
            return Err(Error::BadShape {
                op: "conv3d",
                expected: format!("at least {kt} frames"),
                got: is,
            });
        }
        if self.shape(bias).dims() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: ks,
                right: self.shape(bias),
            });
        }
        let geom = Conv3dGeom {
            t,
            kt,
            plane: ConvGeom {
                c_in,
                c_out,
                h,
                w,
                k,
            },
        };
        let out = kernels::conv3d_forward(self.data(input), self.data(kernel), self.data(bias), geom);
        let value = Tensor::from_parts(Shape::new(&[geom.t_out(), c_out, h, w])?, out);
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2 over `[C x H x W]`, H and W even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = rank3("avg_pool2", self.shape(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadShape {
                op: "avg_pool2",
                expected: "even spatial extents".to_string(),
                got: self.shape(a),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let base = ch * h * w;
                    let s = src[base + 2 * y * w + 2 * x]
                        + src[base + 2 * y * w + 2 * x + 1]
                        + src[base + (2 * y + 1) * w + 2 * x]
                        + src[base + (2 * y + 1) * w + 2 * x + 1];
                    out[(ch * ho + y) * wo + x] = 0.25 * s;
                }
            }
        }
        let value = Tensor::from_parts(Shape::new(&[c, ho, wo])?, out);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::AvgPool2(a), rg))
    }

    // ---- structural ------------------------------------------------------

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidConfig("concat of nothing".to_string()))?;
        let (_, h, w) = rank3("concat", self.shape(first))?;
        let mut c_total = 0;
        for &p in parts {
            let (c, hp, wp) = rank3("concat", self.shape(p))?;
            if (hp, wp) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
            c_total += c;
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::from_parts(Shape::new(&[c_total, h, w])?, out);
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start+len` of a rank-3 tensor.
    pub fn slice_channels(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = rank3("slice_channels", self.shape(src))?;
        if start + len > c || len == 0 {
            return Err(Error::OutOfRange {
                what: "channel slice end",
                index: start + len,
                bound: c + 1,
            });
        }
        let hw = h * w;
        let out = self.data(src)[start * hw..(start + len) * hw].to_vec();
        let value = Tensor::from_parts(Shape::new(&[len, h, w])?, out);
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::Slice { src, start, len }, rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidConfig("stack of nothing".to_string()))?;
        let s = self.shape(first);
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(s.dims());
        let shape = Shape::new(&dims)?;
        let mut out = Vec::with_capacity(shape.volume());
        for &p in parts {
            if self.shape(p) != s {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: s,
                    right: self.shape(p),
                });
            }
            out.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Stack(parts.to_vec()), rg))
    }

    /// Mean over the leading axis.
    pub fn mean_leading(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.rank() < 2 {
            return Err(Error::BadShape {
                op: "mean_leading",
                expected: "rank >= 2".to_string(),
                got: s,
            });
        }
        let n = s.dims()[0];
        let inner = s.volume() / n;
        let mut out = vec![0.0; inner];
        for chunk in self.data(a).chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::from_parts(Shape::new(&s.dims()[1..])?, out);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanLeading(a), rg))
    }

    // ---- reductions ------------------------------------------------------

    /// Per-channel mean over all spatial locations: `[K x H x W] -> [K]`.
    pub fn spatial_average(&mut self, x: Var) -> Result<Var> {
        let (k, h, w) = rank3("spatial_average", self.shape(x))?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::BadShape {
                op: "spatial_average",
                expected: "at least one location".to_string(),
                got: self.shape(x),
            });
        }
        let inv = 1.0 / hw as f64;
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::from_parts(Shape::new(&[k])?, out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpatialAverage(x), rg))
    }

    /// Sum over the channel axis: `[K x H x W] -> [1 x H x W]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = rank3("channel_sum", self.shape(x))?;
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for plane in self.data(x).chunks_exact(hw) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(Shape::new(&[1, h, w])?, out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelSum(x), rg))
    }

    /// Softmax over the N = H*W locations of a `[1 x H x W]` map.
    pub fn softmax_locations(&mut self, x: Var) -> Result<Var> {
        match self.shape(x).chw() {
            Some((1, _, _)) => {}
            _ => {
                return Err(Error::BadShape {
                    op: "softmax_locations",
                    expected: "[1 x H x W]".to_string(),
                    got: self.shape(x),
                })
            }
        }
        let out = softmax(self.data(x));
        let value = Tensor::from_parts(self.shape(x), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- linear algebra --------------------------------------------------

    /// `mat[R x S] * vec[S] -> [R]`, or with `transpose`,
    /// `mat[R x S]^T * vec[R] -> [S]`.
    pub fn matvec(&mut self, mat: Var, v: Var, transpose: bool) -> Result<Var> {
        let ms = self.shape(mat);
        let (r, s) = match *ms.dims() {
            [r, s] => (r, s),
            _ => {
                return Err(Error::BadShape {
                    op: "matvec",
                    expected: "rank-2 matrix".to_string(),
                    got: ms,
                })
            }
        };
        let need = if transpose { r } else { s };
        if self.shape(v).dims() != [need] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: ms,
                right: self.shape(v),
            });
        }
        let (m, x) = (self.data(mat), self.data(v));
        let out = if transpose {
            let mut out = vec![0.0; s];
            for (row, &xi) in m.chunks_exact(s).zip(x) {
                kernels::axpy(xi, row, &mut out);
            }
            out
        } else {
            m.chunks_exact(s).map(|row| kernels::dot(row, x)).collect()
        };
        let n = out.len();
        let value = Tensor::from_parts(Shape::new(&[n])?, out);
        let rg = self.rg(&[mat, v]);
        Ok(self.push(value, Op::MatVec { mat, vec: v, transpose }, rg))
    }

    /// Scales channel `k` of `x[K x H x W]` by `theta[k, col]` for
    /// `theta[K x C]`.
    pub fn scale_channels_by_column(&mut self, x: Var, theta: Var, col: usize) -> Result<Var> {
        let (k, h, w) = rank3("scale_channels_by_column", self.shape(x))?;
        let ts = self.shape(theta);
        let c = match *ts.dims() {
            [tk, c] if tk == k => c,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "scale_channels_by_column",
                    left: self.shape(x),
                    right: ts,
                })
            }
        };
        if col >= c {
            return Err(Error::OutOfRange {
                what: "category",
                index: col,
                bound: c,
            });
        }
        let hw = h * w;
        let th = self.data(theta);
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(ch, plane)| {
                let s = th[ch * c + col];
                plane.iter().map(move |v| v * s)
            })
            .collect();
        let value = Tensor::from_parts(self.shape(x), out);
        let rg = self.rg(&[x, theta]);
        Ok(self.push(value, Op::ScaleColumn { x, theta, col }, rg))
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.shape(logits);
        let l = match *s.dims() {
            [l] => l,
            _ => {
                return Err(Error::BadShape {
                    op: "cross_entropy",
                    expected: "logit vector".to_string(),
                    got: s,
                })
            }
        };
        if label >= l {
            return Err(Error::OutOfRange {
                what: "label",
                index: label,
                bound: l,
            });
        }
        let probs = softmax(self.data(logits));
        let loss = -math::ln(probs[label].max(f64::MIN_POSITIVE));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                label,
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that requires
    /// grad. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.volume() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let mut acc = Acc {
            nodes,
            grads: &mut self.grads,
            fault: self.fault.filter(|f| f.op == nodes[i].op.kind()),
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                acc.with(*a, 0, |d| add_into(d, g));
                let bc = *broadcast;
                acc.with(*b, 1, |d| {
                    if bc {
                        for plane in g.chunks_exact(d.len()) {
                            add_into(d, plane);
                        }
                    } else {
                        add_into(d, g);
                    }
                });
            }
            Op::Mul { a, b, broadcast } => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let bc = *broadcast;
                acc.with(*a, 0, |d| {
                    if bc {
                        let hw = db.len();
                        for (j, v) in d.iter_mut().enumerate() {
                            *v += g[j] * db[j % hw];
                        }
                    } else {
                        for ((v, gj), y) in d.iter_mut().zip(g).zip(db) {
                            *v += gj * y;
                        }
                    }
                });
                acc.with(*b, 1, |d| {
                    if bc {
                        let hw = d.len();
                        for (gp, ap) in g.chunks_exact(hw).zip(da.chunks_exact(hw)) {
                            for ((v, gj), x) in d.iter_mut().zip(gp).zip(ap) {
                                *v += gj * x;
                            }
                        }
                    } else {
                        for ((v, gj), x) in d.iter_mut().zip(g).zip(da) {
                            *v += gj * x;
                        }
                    }
                });
            }
            Op::Scale { a, s } => {
                let s = *s;
                acc.with(*a, 0, |d| kernels::axpy(s, g, d));
            }
            Op::Sigmoid(a) => acc.with(*a, 0, |d| {
                for ((v, gj), y) in d.iter_mut().zip(g).zip(out) {
                    *v += gj * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc.with(*a, 0, |d| {
                for ((v, gj), y) in d.iter_mut().zip(g).zip(out) {
                    *v += gj * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc.with(*a, 0, |d| {
                    for ((v, gj), xi) in d.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *v += gj;
                        }
                    }
                })
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                extra,
                geom,
                cols,
            } => {
                let geom = *geom;
                let kd = nodes[kernel.0].value.data();
                acc.with(*input, 0, |d| kernels::conv2d_backward_input(g, kd, geom, d));
                acc.with(*kernel, 1, |d| kernels::conv2d_backward_kernel(g, cols, geom, d));
                let hw = geom.positions();
                acc.with(*bias, 2, |d| {
                    for (v, plane) in d.iter_mut().zip(g.chunks_exact(hw)) {
                        *v += plane.iter().sum::<f64>();
                    }
                });
                if let Some(e) = extra {
                    acc.with(*e, 3, |d| add_into(d, g));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for (slot, p) in parts.iter().enumerate() {
                    let n = nodes[p.0].value.len();
                    acc.with(*p, slot, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Slice { src, start, len } => {
                let hw = g.len() / len;
                let off = start * hw;
                acc.with(*src, 0, |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::SpatialAverage(x) => {
                let hw = nodes[x.0].value.len() / g.len();
                let inv = 1.0 / hw as f64;
                acc.with(*x, 0, |d| {
                    for (plane, gk) in d.chunks_exact_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|v| *v += gk * inv);
                    }
                });
            }
            Op::ChannelSum(x) => acc.with(*x, 0, |d| {
                for plane in d.chunks_exact_mut(g.len()) {
                    add_into(plane, g);
                }
            }),
            Op::Softmax(x) => {
                let gy: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                acc.with(*x, 0, |d| {
                    for ((v, gj), y) in d.iter_mut().zip(g).zip(out) {
                        *v += y * (gj - gy);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc.with(*a, 0, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::MatVec { mat, vec, transpose } => {
                let m = nodes[mat.0].value.data();
                let x = nodes[vec.0].value.data();
                let s = nodes[mat.0].value.dims()[1];
                if *transpose {
                    // y[s] = sum_r m[r,s] x[r]
                    acc.with(*mat, 0, |d| {
                        for (row, xi) in d.chunks_exact_mut(s).zip(x) {
                            kernels::axpy(*xi, g, row);
                        }
                    });
                    acc.with(*vec, 1, |d| {
                        for (v, row) in d.iter_mut().zip(m.chunks_exact(s)) {
                            *v += kernels::dot(row, g);
                        }
                    });
                } else {
                    acc.with(*mat, 0, |d| {
                        for (row, gi) in d.chunks_exact_mut(s).zip(g) {
                            kernels::axpy(*gi, x, row);
                        }
                    });
                    acc.with(*vec, 1, |d| {
                        for (row, gi) in m.chunks_exact(s).zip(g) {
                            kernels::axpy(*gi, row, d);
                        }
                    });
                }
            }
            Op::ScaleColumn { x, theta, col } => {
                let xv = nodes[x.0].value.data();
                let th = nodes[theta.0].value.data();
                let c = nodes[theta.0].value.dims()[1];
                let k = nodes[theta.0].value.dims()[0];
                let hw = xv.len() / k;
                let col = *col;
                acc.with(*x, 0, |d| {
                    for ch in 0..k {
                        let s = th[ch * c + col];
                        kernels::axpy(s, &g[ch * hw..(ch + 1) * hw], &mut d[ch * hw..(ch + 1) * hw]);
                    }
                });
                acc.with(*theta, 1, |d| {
                    for ch in 0..k {
                        d[ch * c + col] += kernels::dot(&g[ch * hw..(ch + 1) * hw], &xv[ch * hw..(ch + 1) * hw]);
                    }
                });
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = nodes[a.0].value.shape().chw().unwrap_or((0, 0, 0));
                let (ho, wo) = (h / 2, w / 2);
                acc.with(*a, 0, |d| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                let gv = 0.25 * g[(ch * ho + y) * wo + x];
                                let base = ch * h * w;
                                d[base + 2 * y * w + 2 * x] += gv;
                                d[base + 2 * y * w + 2 * x + 1] += gv;
                                d[base + (2 * y + 1) * w + 2 * x] += gv;
                                d[base + (2 * y + 1) * w + 2 * x + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (slot, p) in parts.iter().enumerate() {
                    acc.with(*p, slot, |d| add_into(d, &g[slot * n..(slot + 1) * n]));
                }
            }
            Op::MeanLeading(a) => {
                let inner = g.len();
                let n = nodes[a.0].value.len() / inner;
                let inv = 1.0 / n as f64;
                acc.with(*a, 0, |d| {
                    for chunk in d.chunks_exact_mut(inner) {
                        kernels::axpy(inv, g, chunk);
                    }
                });
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let geom = *geom;
                let x = nodes[input.0].value.data();
                let kd = nodes[kernel.0].value.data();
                acc.with(*input, 0, |d| kernels::conv3d_backward(g, x, kd, geom, Some(d), None, None));
                acc.with(*kernel, 1, |d| kernels::conv3d_backward(g, x, kd, geom, None, Some(d), None));
                acc.with(*bias, 2, |d| kernels::conv3d_backward(g, x, kd, geom, None, None, Some(d)));
            }
            Op::CrossEntropy {
                logits,
                probs,
                label,
            } => {
                let g0 = g[0];
                let label = *label;
                acc.with(*logits, 0, |d| {
                    for (j, (v, p)) in d.iter_mut().zip(probs).enumerate() {
                        let y = if j == label { 1.0 } else { 0.0 };
                        *v += g0 * (p - y);
                    }
                });
            }
        }
    }
}

/// Gradient accumulator for one node's inputs.
struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    fault: Option<BackwardFault>,
}

impl Acc<'_> {
    fn with(&mut self, v: Var, slot: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        match self.fault {
            Some(fault) if fault.slot == slot => {
                let mut tmp = vec![0.0; n];
                f(&mut tmp);
                kernels::axpy(fault.factor, &tmp, buf);
            }
            _ => f(buf),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| math::exp(v - m)).collect();
    let z: f64 = out.iter().sum();
    let inv = 1.0 / z;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}
