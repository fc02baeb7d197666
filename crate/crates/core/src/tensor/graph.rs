use std::collections::HashMap;

use super::gemm::gemm;
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Slope used by the sigmoid-gated GELU approximation `x * sigmoid(1.702 x)`.
const GELU_SLOPE: f64 = 1.702;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleBy(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
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
    Sum {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Mean {
        x: Var,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-writer tape. Each forward pass builds its own graph.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Number of repetitions of `b` inside `a` when `b`'s shape is a suffix of
/// `a`'s shape. Only leading axes broadcast.
fn suffix_reps(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(op, a, b));
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: HashMap::new(),
        }
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter from the attached store. Repeated calls for
    /// the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or(TensorError::NoParamStore)?;
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(mismatch("matmul", sa, sb));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `a[m, k] x b[n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulNt { a, b, m, k, n },
            rg,
        ))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> Result<f64>,
        op: Op,
    ) -> Result<Var> {
        let reps = suffix_reps(op_name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks(bv.len()).take(reps) {
            for (&x, &y) in row.iter().zip(bv) {
                data.push(f(x, y)?);
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| Ok(x + y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| Ok(x - y), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| Ok(x * y), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| {
                if y == 0.0 {
                    Err(TensorError::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    })
                } else {
                    Ok(x / y)
                }
            },
            Op::Div(a, b),
        )
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.map_value(x, |v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.map_value(x, f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Smooth GELU-like activation `x * sigmoid(1.702 x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(GELU_SLOPE * v), Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let t = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, without
    /// affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(v.rows());
        for row in data.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            inv_std.push(r);
        }
        let t = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::Domain {
                op: "slice",
                detail: format!(
                    "range {start}..{end} invalid for axis of size {}",
                    shape[axis]
                ),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: Option<&[bool]>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.value(x).numel() => {
                Err(mismatch(op, self.shape(x), &[m.len()]))
            }
            _ => Ok(()),
        }
    }

    /// Sum of all (optionally masked) elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("sum", x, mask)?;
        let d = self.value(x).data();
        let s = match mask {
            Some(m) => d.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| v).sum(),
            None => d.iter().sum(),
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Sum {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
            rg,
        ))
    }

    /// Mean of all (optionally masked) elements. An empty selection is a
    /// domain error.
    pub fn mean(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("mean", x, mask)?;
        let d = self.value(x).data();
        let (s, count) = match mask {
            Some(m) => d
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1)),
            None => (d.iter().sum(), d.len()),
        };
        if count == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                detail: "mask selects no elements".into(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s / count as f64),
            Op::Mean {
                x,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(*m, *n, *k, g, false, self.value(*b).data(), true, ga, true);
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, k * n);
                    gemm(*k, *m, *n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                if self.rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(*m, *n, *k, g, false, self.value(*b).data(), false, ga, true);
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, n * k);
                    gemm(*n, *m, *k, g, true, self.value(*a).data(), false, gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g, 1.0);
                }
                if self.rg(*b) {
                    let w = self.value(*b).numel();
                    let gb = acc(grads, *b, w);
                    for chunk in g.chunks(w) {
                        add_into(gb, chunk, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let w = bv.len();
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i % w];
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, w);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % w] += gi * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let w = bv.len();
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi / bv[i % w];
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, w);
                    for (i, gi) in g.iter().enumerate() {
                        let d = bv[i % w];
                        gb[i % w] -= gi * av[i] / (d * d);
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if self.rg(*x) {
                    add_into(acc(grads, *x, g.len()), g, c);
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let d: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    acc(grads, *s, 1)[0] += d;
                }
            }
            Op::MulScalar(x, c) => add_into(acc(grads, *x, g.len()), g, *c),
            Op::AddScalar(x) | Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g, 1.0),
            Op::Exp(x) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i];
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(GELU_SLOPE * xv[i]);
                    gx[i] += g[i] * (s + GELU_SLOPE * xv[i] * s * (1.0 - s));
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * sign0(xv[i]);
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += 2.0 * g[i] * xv[i];
                }
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((gr, yr), gxr) in g.chunks(w).zip(out.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let w = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for (r, ((gr, yr), gxr)) in g
                    .chunks(w)
                    .zip(out.chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / w as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        gxr[j] += inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let gv = acc(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&src_shape, *axis);
                let width = node.value.shape()[*axis];
                let gx = acc(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    add_into(
                        &mut gx[dst..dst + width * inner],
                        &g[o * width * inner..(o + 1) * width * inner],
                        1.0,
                    );
                }
            }
            Op::Sum { x, mask } | Op::Mean { x, mask, .. } => {
                let scale = match &node.op {
                    Op::Mean { count, .. } => g[0] / *count as f64,
                    _ => g[0],
                };
                let n = self.value(*x).numel();
                let gx = acc(grads, *x, n);
                match mask {
                    Some(m) => {
                        for (e, &k) in gx.iter_mut().zip(m) {
                            if k {
                                *e += scale;
                            }
                        }
                    }
                    None => gx.iter_mut().for_each(|e| *e += scale),
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut pairs: Vec<_> = self.param_grads().collect();
        pairs.sort_by_key(|(id, _)| *id);
        for (id, g) in pairs {
            add_into(store.get_mut(id).grad.data_mut(), g, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [1.5, -2.0, 0.25, 3.0, 7.0, -1.0];
        let a = g.constant(t(&[3, 2], &a_data));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y).data(), &a_data);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[2.5; 4]));
        let y = g.layer_norm(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let loss = g.sum(sq, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn abs_subgradient_is_zero_at_ties() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let d = g.sub(x, y).unwrap();
        let a = g.abs(d);
        let loss = g.mean(a, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 3], &[0.0; 6]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(t(&[2], &[0.0; 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            g.log(x),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        assert!(matches!(
            g.div(one, x),
            Err(TensorError::Domain { op: "div", .. })
        ));
        let m = [false, false];
        assert!(g.mean(one, Some(&m)).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_param_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, -3.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::with_params(&store);
            let w = g.param(id).unwrap();
            let sq = g.square(w);
            let loss = g.sum(sq, None).unwrap();
            let grads = g.backward(loss).unwrap();
            drop(g);
            grads.accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).grad.data(), &[4.0, -12.0]);
    }

    #[test]
    fn broadcast_add_over_leading_axes() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2], &[10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(y, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }
}
