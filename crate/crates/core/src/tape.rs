//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward op appends a node holding its output value and, when any
//! input participates in differentiation, the inputs and saved activations its
//! backward rule needs. Nodes are appended in evaluation order, so walking the
//! tape backwards is a reverse topological traversal and each node is visited
//! exactly once.
//!
//! Binary elementwise ops broadcast along trailing axes only: one operand's
//! shape must be a suffix of the other's.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{col2im, im2col, reduce_map, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_layout, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds with their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Softplus,
    InstanceNorm { eps: f64 },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
    L2Normalize { axis: usize, eps: f64 },
    L2Norm { axis: usize },
    Exp,
    Log,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    LogSumExp { axis: usize },
    Scale { factor: f64 },
    StopGradient,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvTranspose2d { .. } => "conv_transpose2d",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::IndexSelect { .. } => "index_select",
            OpKind::L2Normalize { .. } => "l2_normalize",
            OpKind::L2Norm { .. } => "l2_norm",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::LogSumExp { .. } => "log_sum_exp",
            OpKind::Scale { .. } => "scale",
            OpKind::StopGradient => "stop_gradient",
        }
    }
}

enum Op<T> {
    Leaf,
    /// Backward already ran; saved state was released.
    Cleared,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Softplus(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    L2Norm {
        x: Var,
        axis: usize,
    },
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Sum {
        x: Var,
        map: Vec<usize>,
        factor: T,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation, able to run reverse-mode
/// differentiation once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(long.to_vec())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ))
    } else {
        Ok(())
    }
}

/// Sums a broadcast gradient of length `out_len` down to an operand of
/// length `len` (its shape being a trailing suffix).
fn unbroadcast<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls for the same id
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Gradients of every bound trainable parameter, sorted by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn forward(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::Conv2d { .. } | OpKind::ConvTranspose2d { .. } => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::invalid(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Transpose => self.transpose(inputs[0]),
            OpKind::Conv2d { stride, pad } => self.conv2d(inputs[0], inputs[1], *stride, *pad),
            OpKind::ConvTranspose2d { stride, pad } => {
                self.conv_transpose2d(inputs[0], inputs[1], *stride, *pad)
            }
            OpKind::LeakyRelu { slope } => self.leaky_relu(inputs[0], *slope),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Tanh => self.tanh(inputs[0]),
            OpKind::Softplus => self.softplus(inputs[0]),
            OpKind::InstanceNorm { eps } => self.instance_norm(inputs[0], *eps),
            OpKind::Reshape { shape } => self.reshape(inputs[0], shape),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::IndexSelect { axis, indices } => self.index_select(inputs[0], *axis, indices),
            OpKind::L2Normalize { axis, eps } => self.l2_normalize(inputs[0], *axis, *eps),
            OpKind::L2Norm { axis } => self.l2_norm(inputs[0], *axis),
            OpKind::Exp => self.exp(inputs[0]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Abs => self.abs(inputs[0]),
            OpKind::Clamp { lo, hi } => self.clamp(inputs[0], *lo, *hi),
            OpKind::Sum { axes } => self.sum(inputs[0], axes),
            OpKind::Mean { axes } => self.mean(inputs[0], axes),
            OpKind::LogSumExp { axis } => self.log_sum_exp(inputs[0], *axis),
            OpKind::Scale { factor } => self.scale(inputs[0], *factor),
            OpKind::StopGradient => Ok(self.stop_gradient(inputs[0])),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect();
        Ok((Tensor::new(&shape, data)?, shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push("transpose", value, &[a], Op::Transpose(a))
    }

    /// Convolution of `x` (N, H, W, C) with `w` (KH, KW, C, CO).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (ho, wo) = match (
            ConvGeom::out_extent(sx[1], sw[0], stride, pad),
            ConvGeom::out_extent(sx[2], sw[1], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            kh: sw[0],
            kw: sw[1],
            stride,
            pad,
            ho,
            wo,
        };
        let co = sw[3];
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * co];
        T::gemm(
            geom.rows(),
            geom.patch_len(),
            co,
            T::one(),
            &cols,
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(&[geom.n, ho, wo, co], out)?;
        self.push("conv2d", value, &[x, w], Op::Conv2d { x, w, geom, cols })
    }

    /// Transposed convolution of `x` (N, H, W, CI) with `w` (CI, KH, KW, CO).
    /// Output extent is `(H - 1) * stride - 2 * pad + KH`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[0] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (h, wd) = match (
            ConvGeom::transpose_extent(sx[1], sw[1], stride, pad),
            ConvGeom::transpose_extent(sx[2], sw[2], stride, pad),
        ) {
            (Some(h), Some(wd)) => (h, wd),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let geom = ConvGeom {
            n: sx[0],
            h,
            w: wd,
            c: sw[3],
            kh: sw[1],
            kw: sw[2],
            stride,
            pad,
            ho: sx[1],
            wo: sx[2],
        };
        let ci = sx[3];
        let mut cols = vec![T::zero(); geom.rows() * geom.patch_len()];
        T::gemm(
            geom.rows(),
            ci,
            geom.patch_len(),
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut cols,
        );
        let out = col2im(&cols, &geom);
        let value = Tensor::new(&[geom.n, h, wd, geom.c], out)?;
        self.push(
            "conv_transpose2d",
            value,
            &[x, w],
            Op::ConvTranspose2d { x, w, geom },
        )
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, value, &[a], op)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::c(slope);
        self.unary(
            "leaky_relu",
            a,
            |x| if x > T::zero() { x } else { s * x },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::LeakyRelu(a, T::zero()),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "softplus",
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (lo, hi) = (T::c(lo), T::c(hi));
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::c(factor);
        self.unary("scale", a, |x| x * f, Op::Scale(a, f))
    }

    /// Value-identical copy that backward treats as a constant.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push_node(value, Op::Leaf, false)
    }

    /// Normalizes each (sample, channel) of an NHWC tensor over its spatial
    /// extent: `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(
                "instance_norm",
                format!("expected NHWC tensor, got {s:?}"),
            ));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let count = T::c(hw as f64);
        let eps = T::c(eps);
        for b in 0..n {
            let base = b * hw * c;
            for ch in 0..c {
                let mut mean = T::zero();
                for p in 0..hw {
                    mean = mean + x[base + p * c + ch];
                }
                mean = mean / count;
                let mut var = T::zero();
                for p in 0..hw {
                    let d = x[base + p * c + ch] - mean;
                    var = var + d * d;
                }
                var = var / count;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[b * c + ch] = inv;
                for p in 0..hw {
                    let i = base + p * c + ch;
                    out[i] = (x[i] - mean) * inv;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        self.push("instance_norm", value, &[a], Op::InstanceNorm { x: a, inv_std })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, &[a], Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Gathers `indices` along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("index_select", &s, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[axis]) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of range {} on axis {axis}", s[axis]),
            ));
        }
        let (outer, len, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        let value = Tensor::new(&shape, out)?;
        self.push(
            "index_select",
            value,
            &[a],
            Op::IndexSelect {
                x: a,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("l2_normalize", &s, axis)?;
        let (outer, len, inner) = axis_layout(&s, axis);
        let x = self.value(a).data();
        let eps = T::c(eps);
        let mut out = vec![T::zero(); x.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut ss = T::zero();
                for k in 0..len {
                    let v = x[(o * len + k) * inner + i];
                    ss = ss + v * v;
                }
                let r = (ss + eps).sqrt();
                norms[o * inner + i] = r;
                for k in 0..len {
                    let idx = (o * len + k) * inner + i;
                    out[idx] = x[idx] / r;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        self.push(
            "l2_normalize",
            value,
            &[a],
            Op::L2Normalize { x: a, axis, norms },
        )
    }

    /// Euclidean norm along `axis` (axis removed). The gradient at a zero
    /// vector is taken as zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("l2_norm", &s, axis)?;
        let (outer, len, inner) = axis_layout(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut ss = T::zero();
                for k in 0..len {
                    let v = x[(o * len + k) * inner + i];
                    ss = ss + v * v;
                }
                out[o * inner + i] = ss.sqrt();
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push("l2_norm", value, &[a], Op::L2Norm { x: a, axis })
    }

    fn reduce(&mut self, name: &'static str, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        for &ax in axes {
            check_axis(name, &s, ax)?;
        }
        let (out_shape, map) = reduce_map(&s, axes);
        let count: usize = axes.iter().map(|&ax| s[ax]).product();
        let factor = if mean {
            T::one() / T::c(count as f64)
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&x, &m) in self.value(a).data().iter().zip(&map) {
            out[m] = out[m] + x;
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * factor);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(name, value, &[a], Op::Sum { x: a, map, factor })
    }

    /// Sums over `axes`, removing them.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum", a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean", a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    /// `log(sum(exp(x)))` along `axis` (axis removed), with max subtraction.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("log_sum_exp", &s, axis)?;
        let (outer, len, inner) = axis_layout(&s, axis);
        if len == 0 {
            return Err(Error::invalid("log_sum_exp", "empty reduction axis"));
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| x[(o * len + k) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let acc = (0..len).fold(T::zero(), |acc, k| acc + (at(k) - m).exp());
                out[o * inner + i] = m + acc.ln();
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push("log_sum_exp", value, &[a], Op::LogSumExp { x: a, axis })
    }

    /// Runs reverse-mode differentiation from a scalar `loss`. Afterwards
    /// every trainable leaf holds its gradient and the tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed || self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        self.grads = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            let g = if leaf {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(node.value.shape(), data)?)
            } else {
                None
            };
            self.grads.push(g);
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Cleared;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Cleared => return Err(Error::EmptyTape),
            Op::Add(a, b) => {
                acc(*a, unbroadcast(g, self.value(*a).numel()));
                acc(*b, unbroadcast(g, self.value(*b).numel()));
            }
            Op::Sub(a, b) => {
                acc(*a, unbroadcast(g, self.value(*a).numel()));
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                acc(*b, unbroadcast(&neg, self.value(*b).numel()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| x * db[k % db.len()])
                        .collect();
                    acc(*a, unbroadcast(&ga, da.len()));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| x * da[k % da.len()])
                        .collect();
                    acc(*b, unbroadcast(&gb, db.len()));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, false, self.value(*b).data(), true, T::zero(), &mut ga);
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), true, g, false, T::zero(), &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, ga);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let co = self.shape(*w)[3];
                let (rows, plen) = (geom.rows(), geom.patch_len());
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); plen * co];
                    T::gemm(plen, rows, co, T::one(), cols, true, g, false, T::zero(), &mut gw);
                    acc(*w, gw);
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![T::zero(); rows * plen];
                    T::gemm(rows, co, plen, T::one(), g, false, self.value(*w).data(), true, T::zero(), &mut gcols);
                    acc(*x, col2im(&gcols, geom));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let ci = self.shape(*x)[3];
                let (rows, plen) = (geom.rows(), geom.patch_len());
                let gcols = im2col(g, geom);
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); rows * ci];
                    T::gemm(rows, plen, ci, T::one(), &gcols, false, self.value(*w).data(), true, T::zero(), &mut gx);
                    acc(*x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); ci * plen];
                    T::gemm(ci, rows, plen, T::one(), self.value(*x).data(), true, &gcols, false, T::zero(), &mut gw);
                    acc(*w, gw);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > T::zero() { d } else { d * *slope })
                    .collect();
                acc(*a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.iter().zip(out).map(|(&d, &y)| d * (T::one() - y * y)).collect();
                acc(*a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| d / (T::one() + (-v).exp()))
                    .collect();
                acc(*a, ga);
            }
            Op::Exp(a) => {
                acc(*a, g.iter().zip(out).map(|(&d, &y)| d * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(&d, &v)| d / v).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect();
                acc(*a, ga);
            }
            Op::Scale(a, f) => {
                acc(*a, g.iter().map(|&d| d * *f).collect());
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = self.shape(*x);
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let count = T::c(hw as f64);
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    let base = b * hw * c;
                    for ch in 0..c {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for p in 0..hw {
                            let idx = base + p * c + ch;
                            m1 = m1 + g[idx];
                            m2 = m2 + g[idx] * out[idx];
                        }
                        m1 = m1 / count;
                        m2 = m2 / count;
                        let inv = inv_std[b * c + ch];
                        for p in 0..hw {
                            let idx = base + p * c + ch;
                            gx[idx] = inv * (g[idx] - m1 - out[idx] * m2);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_layout(node.value.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.shape(*v)[*axis] * inner;
                        parts[k].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    acc(*v, part);
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let s = self.shape(*x);
                let (outer, len, inner) = axis_layout(s, *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                let mut off = 0;
                for o in 0..outer {
                    for &i in indices {
                        let start = (o * len + i) * inner;
                        for (d, &v) in gx[start..start + inner].iter_mut().zip(&g[off..off + inner]) {
                            *d = *d + v;
                        }
                        off += inner;
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, k| s + g[idx(k)] * out[idx(k)]);
                        let r = norms[o * inner + i];
                        for k in 0..len {
                            gx[idx(k)] = (g[idx(k)] - out[idx(k)] * dot) / r;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::L2Norm { x, axis } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                let xs = self.value(*x).data();
                let mut gx = vec![T::zero(); xs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = out[o * inner + i];
                        if r > T::zero() {
                            let d = g[o * inner + i] / r;
                            for k in 0..len {
                                let idx = (o * len + k) * inner + i;
                                gx[idx] = d * xs[idx];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum { x, map, factor } => {
                acc(*x, map.iter().map(|&m| g[m] * *factor).collect());
            }
            Op::LogSumExp { x, axis } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                let xs = self.value(*x).data();
                let mut gx = vec![T::zero(); xs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = out[o * inner + i];
                        let d = g[o * inner + i];
                        for k in 0..len {
                            let idx = (o * len + k) * inner + i;
                            gx[idx] = d * (xs[idx] - lse).exp();
                        }
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0, 0.0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.log_sum_exp(x, 0).unwrap();
        assert!((tape.value(y).item() - 2f64.ln()).abs() < 1e-15);
        assert!((tape.value(y).item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn log_sum_exp_large_logits_are_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.log_sum_exp(x, 0).unwrap();
        assert!((tape.value(y).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let y = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]), true);
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx), tape.value(x));
        let prod = tape.mul(sx, y).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // x used three times: loss = sum(x) + sum(2x) + sum(x*c)
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, -1.0]));
        let a = tape.sum_all(x).unwrap();
        let b2 = tape.scale(x, 2.0).unwrap();
        let b = tape.sum_all(b2).unwrap();
        let xc = tape.mul(x, c).unwrap();
        let d = tape.sum_all(xc).unwrap();
        let ab = tape.add(a, b).unwrap();
        let loss = tape.add(ab, d).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::EmptyTape)));
        assert!(Tape::<f64>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::<f64>::zeros(&[2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn trailing_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t(&[2], &[10.0, 20.0]), true);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 32, 32, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 16]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 16, 16]);
        let wt = tape.constant(Tensor::zeros(&[16, 4, 4, 8]));
        let z = tape.conv_transpose2d(y, wt, 2, 1).unwrap();
        assert_eq!(tape.shape(z), &[2, 32, 32, 8]);
        let bad = tape.constant(Tensor::zeros(&[3, 3, 4, 16]));
        assert!(tape.conv2d(x, bad, 2, 1).is_err());
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        // 1x3x3x1 input, 2x2 kernel, stride 1, no pad.
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(t(&[2, 2, 1, 1], &[1., 0., 0., -1.]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn instance_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full(&[1, 4, 4, 2], 3.0));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_and_index_select() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.index_select(c, 1, &[2, 0]).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 1.0, 6.0, 2.0]);
        assert!(tape.index_select(c, 1, &[3]).is_err());
    }
}
