use std::str::FromStr;

use super::{invalid, numel, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op kinds accepted by [`Graph::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    DivScalar,
    AddRowBias,
    MatMul,
    Conv2d,
    Relu,
    MaxPool2,
    Mean,
    Sum,
    Abs,
    Square,
    Softmax,
    LogSoftmax,
    FrobeniusNorm,
    SmoothL1,
    Gram,
    RoiPool,
    Gather,
    Reshape,
    BceWithLogits,
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "scale" => Self::Scale,
            "add_scalar" => Self::AddScalar,
            "div_scalar" => Self::DivScalar,
            "add_row_bias" => Self::AddRowBias,
            "matmul" => Self::MatMul,
            "conv2d" => Self::Conv2d,
            "relu" => Self::Relu,
            "max_pool2" => Self::MaxPool2,
            "mean" => Self::Mean,
            "sum" => Self::Sum,
            "abs" => Self::Abs,
            "square" => Self::Square,
            "softmax" => Self::Softmax,
            "log_softmax" => Self::LogSoftmax,
            "frobenius_norm" => Self::FrobeniusNorm,
            "smooth_l1" => Self::SmoothL1,
            "gram" => Self::Gram,
            "roi_pool" => Self::RoiPool,
            "gather" => Self::Gather,
            "reshape" => Self::Reshape,
            "bce_with_logits" => Self::BceWithLogits,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for [`Graph::forward_op`]; each kind reads only the fields it needs.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub scalar: Option<f64>,
    pub axis: Option<usize>,
    pub range: Option<(usize, usize)>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    /// RoIs as `[x1, y1, x2, y2]` in input-image coordinates.
    pub rois: Option<Vec<[f64; 4]>>,
    pub pool_size: Option<usize>,
    pub indices: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Mean {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Abs(Var),
    Square(Var),
    Softmax {
        input: Var,
        axis: usize,
        lo: usize,
        hi: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    FrobeniusNorm(Var),
    SmoothL1(Var),
    Gram(Var),
    /// Gather and RoI pooling share the same backward: scatter-add by source index.
    Select {
        input: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    BceWithLogits {
        input: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of forward ops. Node ids are assigned in creation
/// order, so inputs always precede the nodes that consume them.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient buffers for the `requires_grad` leaves reached from a root.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it was not reached or does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(v.0))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        if self.value(s).numel() != 1 {
            return Err(invalid("div_scalar", format!("divisor has shape {:?}", self.shape(s))));
        }
        let d = self.item(s);
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x / d).collect(),
        };
        Ok(self.push(value, Op::DivScalar(a, s), &[a, s]))
    }

    /// Adds a length-`k` bias to every row of an `[n, k]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let k = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data.chunks_mut(k) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let geo = ConvGeometry::new(xs, ws, stride, pad)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let out = geo.forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor {
            shape: vec![geo.o, geo.oh, geo.ow],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// 2×2 max-pool with stride 2 over a `[C, H, W]` input; ties pick the first index
    /// in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(invalid("max_pool2", format!("expected [C, H>=2, W>=2], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![c, oh, ow],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Mean over `axis`, which is removed from the output shape.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(invalid("mean", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, v)| *d += v);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Mean { input, axis }, &[input]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Softmax along `axis`, optionally restricted to the index range `lo..hi`
    /// of that axis. The output keeps only the restricted slice.
    pub fn softmax(&mut self, input: Var, axis: usize, range: Option<(usize, usize)>) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (lo, hi) = range.unwrap_or((0, s[axis]));
        if lo >= hi || hi > s[axis] {
            return Err(invalid("softmax", format!("range {lo}..{hi} invalid for axis length {}", s[axis])));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let width = hi - lo;
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * width * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (lo..hi).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in lo..hi {
                    let e = (x[at(k)] - max).exp();
                    out[(o * width + k - lo) * inner + i] = e;
                    z += e;
                }
                for k in 0..width {
                    out[(o * width + k) * inner + i] /= z;
                }
            }
        }
        let mut shape = s;
        shape[axis] = width;
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Softmax { input, axis, lo, hi }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(invalid("log_softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let value = Tensor { shape: s, data: out };
        Ok(self.push(value, Op::LogSoftmax { input, axis }, &[input]))
    }

    /// `sqrt(sum(x²))`. The gradient at the all-zero input is taken as zero.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let ss: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(ss.sqrt()), Op::FrobeniusNorm(a), &[a])
    }

    /// Elementwise Huber loss with unit transition point.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.map(a, Op::SmoothL1(a), |x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
    }

    /// `X · Xᵀ` for a matrix `X`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("gram", format!("expected a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v: f64 = (0..n).map(|k| x[i * n + k] * x[j * n + k]).sum();
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
        let value = Tensor {
            shape: vec![m, m],
            data: out,
        };
        Ok(self.push(value, Op::Gram(a), &[a]))
    }

    /// Nearest-neighbour RoI pooling of a `[C, H, W]` feature map into
    /// `[n, C, P, P]`. Each RoI is divided into a `P×P` grid and every cell
    /// copies the feature at its centre, with image coordinates mapped to
    /// feature coordinates by `stride`.
    pub fn roi_pool(&mut self, features: Var, rois: &[[f64; 4]], pool: usize, stride: f64) -> Result<Var> {
        self.check(features)?;
        let s = self.shape(features);
        if s.len() != 3 {
            return Err(invalid("roi_pool", format!("expected [C, H, W], got {s:?}")));
        }
        if rois.is_empty() || pool == 0 || stride <= 0.0 {
            return Err(invalid("roi_pool", "need at least one RoI, positive pool size and stride"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut src = Vec::with_capacity(rois.len() * c * pool * pool);
        let cell = |lo: f64, hi: f64, i: usize, limit: usize| -> usize {
            let pos = (lo + (i as f64 + 0.5) * (hi - lo) / pool as f64) / stride;
            (pos.floor().max(0.0) as usize).min(limit - 1)
        };
        for roi in rois {
            if roi.iter().any(|v| !v.is_finite()) {
                return Err(invalid("roi_pool", format!("non-finite RoI {roi:?}")));
            }
            let ys: Vec<usize> = (0..pool).map(|i| cell(roi[1], roi[3], i, h)).collect();
            let xs: Vec<usize> = (0..pool).map(|i| cell(roi[0], roi[2], i, w)).collect();
            for ch in 0..c {
                for &y in &ys {
                    for &x in &xs {
                        src.push((ch * h + y) * w + x);
                    }
                }
            }
        }
        let shape = vec![rois.len(), c, pool, pool];
        Ok(self.select(features, src, shape))
    }

    /// Flat gather: `out[i] = input.flat[indices[i]]`, returned as a vector.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        self.check(input)?;
        let n = self.value(input).numel();
        if indices.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid("gather", format!("index {bad} out of bounds for {n} elements")));
        }
        Ok(self.select(input, indices.to_vec(), vec![indices.len()]))
    }

    fn select(&mut self, input: Var, src: Vec<usize>, shape: Vec<usize>) -> Var {
        let x = self.value(input).data();
        let data = src.iter().map(|&i| x[i]).collect();
        let value = Tensor { shape, data };
        self.push(value, Op::Select { input, src }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Elementwise binary cross-entropy between logits and fixed targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        self.check(input)?;
        if targets.len() != self.value(input).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(input).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let targets = targets.to_vec();
        Ok(self.push(value, Op::BceWithLogits { input, targets }, &[input]))
    }

    /// Applies an op selected at run time.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity = match kind {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::DivScalar
            | OpKind::AddRowBias
            | OpKind::MatMul => 2,
            OpKind::Conv2d => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(invalid("forward_op", format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
        }
        let need = |name: &str| invalid("forward_op", format!("{kind:?} requires attribute `{name}`"));
        let x = inputs[0];
        match kind {
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Sub => self.sub(x, inputs[1]),
            OpKind::Mul => self.mul(x, inputs[1]),
            OpKind::Scale => Ok(self.scale(x, attrs.scalar.ok_or_else(|| need("scalar"))?)),
            OpKind::AddScalar => Ok(self.add_scalar(x, attrs.scalar.ok_or_else(|| need("scalar"))?)),
            OpKind::DivScalar => self.div_scalar(x, inputs[1]),
            OpKind::AddRowBias => self.add_row_bias(x, inputs[1]),
            OpKind::MatMul => self.matmul(x, inputs[1]),
            OpKind::Conv2d => self.conv2d(
                x,
                inputs[1],
                inputs[2],
                attrs.stride.unwrap_or(1),
                attrs.pad.unwrap_or(0),
            ),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::MaxPool2 => self.max_pool2(x),
            OpKind::Mean => self.mean_axis(x, attrs.axis.ok_or_else(|| need("axis"))?),
            OpKind::Sum => Ok(self.sum(x)),
            OpKind::Abs => Ok(self.abs(x)),
            OpKind::Square => Ok(self.square(x)),
            OpKind::Softmax => self.softmax(x, attrs.axis.ok_or_else(|| need("axis"))?, attrs.range),
            OpKind::LogSoftmax => self.log_softmax(x, attrs.axis.ok_or_else(|| need("axis"))?),
            OpKind::FrobeniusNorm => Ok(self.frobenius_norm(x)),
            OpKind::SmoothL1 => Ok(self.smooth_l1(x)),
            OpKind::Gram => self.gram(x),
            OpKind::RoiPool => self.roi_pool(
                x,
                attrs.rois.as_deref().ok_or_else(|| need("rois"))?,
                attrs.pool_size.ok_or_else(|| need("pool_size"))?,
                attrs.stride.ok_or_else(|| need("stride"))? as f64,
            ),
            OpKind::Gather => self.gather(x, attrs.indices.as_deref().ok_or_else(|| need("indices"))?),
            OpKind::Reshape => self.reshape(x, attrs.shape.clone().ok_or_else(|| need("shape"))?),
            OpKind::BceWithLogits => {
                self.bce_with_logits(x, attrs.targets.as_deref().ok_or_else(|| need("targets"))?)
            }
        }
    }

    /// Smallest distance of any differentiable path's input to a non-smooth
    /// point: 0 for relu and abs, ±1 for smooth-L1, and the gap between the
    /// two largest entries of a max-pool window (windows whose two largest
    /// entries are both zero are skipped). `f64::INFINITY` if the graph
    /// has no such op on a path that requires gradients.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    margin = self.value(*a).data().iter().fold(margin, |m, x| m.min(x.abs()));
                }
                Op::SmoothL1(a) => {
                    margin = self.value(*a).data().iter().fold(margin, |m, x| m.min((x.abs() - 1.0).abs()));
                }
                Op::MaxPool2 { input, .. } => {
                    let s = self.shape(*input);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let x = self.value(*input).data();
                    for ch in 0..c {
                        for y in 0..h / 2 {
                            for xo in 0..w / 2 {
                                let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .map(|(dy, dx)| x[ch * h * w + (2 * y + dy) * w + 2 * xo + dx])
                                    .collect();
                                win.sort_by(|a, b| b.total_cmp(a));
                                // a tie between exact zeros comes from relu
                                // outputs, whose own margin is checked above
                                if win[1] != 0.0 {
                                    margin = margin.min(win[0] - win[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse-mode sweep from a scalar `root`. Does not mutate the graph, so
    /// calling it repeatedly yields identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: gout,
                });
                continue;
            }
            self.propagate(node, &gout, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(g, gout, 1.0));
                acc(*b, &mut |g| axpy(g, gout, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(g, gout, 1.0));
                acc(*b, &mut |g| axpy(g, gout, -1.0));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |g| g.iter_mut().zip(gout).zip(xb).for_each(|((g, d), y)| *g += d * y));
                acc(*b, &mut |g| g.iter_mut().zip(gout).zip(xa).for_each(|((g, d), x)| *g += d * x));
            }
            Op::Scale(a, s) => acc(*a, &mut |g| axpy(g, gout, *s)),
            Op::AddScalar(a) => acc(*a, &mut |g| axpy(g, gout, 1.0)),
            Op::DivScalar(a, s) => {
                let d = nodes[s.0].value.item();
                acc(*a, &mut |g| axpy(g, gout, 1.0 / d));
                let xa = val(*a);
                let ds: f64 = gout.iter().zip(xa).map(|(g, x)| g * x).sum::<f64>() * (-1.0 / (d * d));
                acc(*s, &mut |g| g[0] += ds);
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |g| axpy(g, gout, 1.0));
                let k = nodes[b.0].value.numel();
                acc(*b, &mut |g| {
                    for row in gout.chunks(k) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a), val(*b));
                // dA = G Bᵀ
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let row_b = &xb[p * n..(p + 1) * n];
                            let row_g = &gout[i * n..(i + 1) * n];
                            g[i * k + p] += row_g.iter().zip(row_b).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ G
                acc(*b, &mut |g| {
                    for i in 0..m {
                        let row_g = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = xa[i * k + p];
                            if a_ip != 0.0 {
                                axpy(&mut g[p * n..(p + 1) * n], row_g, a_ip);
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xs = nodes[input.0].value.shape();
                let ws = nodes[weight.0].value.shape();
                let geo = ConvGeometry::new(xs, ws, *stride, *pad).expect("validated in forward");
                let (x, w) = (val(*input), val(*weight));
                acc(*input, &mut |g| geo.backward_input(gout, w, g));
                acc(*weight, &mut |g| geo.backward_weight(gout, x, g));
                acc(*bias, &mut |g| {
                    let plane = geo.oh * geo.ow;
                    for (o, gb) in g.iter_mut().enumerate() {
                        *gb += gout[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } | Op::Select { input, src: argmax } => {
                acc(*input, &mut |g| {
                    for (&i, d) in argmax.iter().zip(gout) {
                        g[i] += d;
                    }
                });
            }
            Op::Mean { input, axis } => {
                let s = nodes[input.0].value.shape();
                let (outer, len, inner) = axis_split(s, *axis);
                let inv = 1.0 / len as f64;
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            axpy(&mut g[(o * len + k) * inner..(o * len + k + 1) * inner], src, inv);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = gout[0];
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(gout).zip(x) {
                        *g += d * sign(x);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |g| g.iter_mut().zip(gout).zip(x).for_each(|((g, d), x)| *g += 2.0 * x * d));
            }
            Op::Softmax { input, axis, lo, hi } => {
                let s = nodes[input.0].value.shape();
                let (outer, len, inner) = axis_split(s, *axis);
                let width = hi - lo;
                let y = node.value.data();
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * width + k) * inner + i;
                            let dot: f64 = (0..width).map(|k| gout[at(k)] * y[at(k)]).sum();
                            for k in 0..width {
                                g[(o * len + lo + k) * inner + i] += y[at(k)] * (gout[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let s = nodes[input.0].value.shape();
                let (outer, len, inner) = axis_split(s, *axis);
                let y = node.value.data();
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let total: f64 = (0..len).map(|k| gout[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += gout[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::FrobeniusNorm(a) => {
                let n = node.value.item();
                let x = val(*a);
                let d = if n > 0.0 { gout[0] / n } else { 0.0 };
                acc(*a, &mut |g| axpy(g, x, d));
            }
            Op::SmoothL1(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(gout).zip(x) {
                        *g += d * if x.abs() < 1.0 { x } else { sign(x) };
                    }
                });
            }
            Op::Gram(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let x = val(*a);
                // dX = (G + Gᵀ) X
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for j in 0..m {
                            let c = gout[i * m + j] + gout[j * m + i];
                            if c != 0.0 {
                                axpy(&mut g[i * n..(i + 1) * n], &x[j * n..(j + 1) * n], c);
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| axpy(g, gout, 1.0)),
            Op::BceWithLogits { input, targets } => {
                let x = val(*input);
                acc(*input, &mut |g| {
                    for (((g, d), &z), t) in g.iter_mut().zip(gout).zip(x).zip(targets) {
                        *g += d * (sigmoid(z) - t);
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(row, &b[p * n..(p + 1) * n], a_ip);
            }
        }
    }
    out
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            o,
            k,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Output rows `y` whose receptive row `y*stride + ky - pad` lies inside the input,
    /// paired with that input row.
    fn rows(&self, kk: usize, out_len: usize, in_len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (stride, pad) = (self.stride, self.pad);
        (0..out_len).filter_map(move |y| {
            let pos = (y * stride + kk).checked_sub(pad)?;
            (pos < in_len).then_some((y, pos))
        })
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.o * plane];
        for o in 0..self.o {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b[o]);
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = w[((o * self.c + c) * self.k + ky) * self.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for (y, iy) in self.rows(ky, self.oh, self.h) {
                            let src = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                            let dst = &mut out[o * plane + y * self.ow..o * plane + (y + 1) * self.ow];
                            for (xo, ix) in self.rows(kx, self.ow, self.w) {
                                dst[xo] += wv * src[ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, gout: &[f64], w: &[f64], g: &mut [f64]) {
        let plane = self.oh * self.ow;
        for o in 0..self.o {
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = w[((o * self.c + c) * self.k + ky) * self.k + kx];
                        for (y, iy) in self.rows(ky, self.oh, self.h) {
                            let src = &gout[o * plane + y * self.ow..o * plane + (y + 1) * self.ow];
                            let dst = &mut g[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                            for (xo, ix) in self.rows(kx, self.ow, self.w) {
                                dst[ix] += wv * src[xo];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, gout: &[f64], x: &[f64], g: &mut [f64]) {
        let plane = self.oh * self.ow;
        for o in 0..self.o {
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let mut total = 0.0;
                        for (y, iy) in self.rows(ky, self.oh, self.h) {
                            let go = &gout[o * plane + y * self.ow..o * plane + (y + 1) * self.ow];
                            let src = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                            for (xo, ix) in self.rows(kx, self.ow, self.w) {
                                total += go[xo] * src[ix];
                            }
                        }
                        g[((o * self.c + c) * self.k + ky) * self.k + kx] += total;
                    }
                }
            }
        }
    }
}
