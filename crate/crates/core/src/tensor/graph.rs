use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::alignment::InterpolationPlan;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Primitive kinds addressable through [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Silu,
    /// Inputs: `x`, `gain`.
    RmsNorm { eps: f64 },
    L2NormalizeRows { eps: f64 },
    RowSoftmax,
    LogSoftmax,
    Log,
    Sum,
    Mean,
    SumLastDim,
    LogSumExpLastDim,
    GatherRows { ids: Vec<usize>, prefix: Vec<usize> },
    PickPerRow { index: Vec<usize> },
    Transpose,
    Concat,
    Reshape(Vec<usize>),
    Rope { base: f64 },
    CausalAttention,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulT => "matmul_t",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Silu => "silu",
            Primitive::RmsNorm { .. } => "rms_norm",
            Primitive::L2NormalizeRows { .. } => "l2_normalize_rows",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumLastDim => "sum_last_dim",
            Primitive::LogSumExpLastDim => "logsumexp_last_dim",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::PickPerRow { .. } => "pick_per_row",
            Primitive::Transpose => "transpose",
            Primitive::Concat => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::Rope { .. } => "rope",
            Primitive::CausalAttention => "causal_attention",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, vec_rhs: bool },
    MatMulT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Gelu { x: usize },
    Silu { x: usize },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<f64> },
    L2Normalize { x: usize, inv_norm: Vec<f64>, clamped: Vec<bool> },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    Log { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumLastDim { x: usize },
    LogSumExp { x: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    PickPerRow { x: usize, index: Vec<usize> },
    Transpose { x: usize },
    Concat { parts: Vec<(usize, usize)> },
    Reshape { x: usize },
    Rope { x: usize, cos: Vec<f64>, sin: Vec<f64>, seq: usize, heads: usize, head_dim: usize },
    Attention { q: usize, k: usize, v: usize, probs: Vec<f64>, dims: AttnDims },
    Interpolate { x: usize, plan: Arc<InterpolationPlan> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order: every
/// op's inputs were recorded before it.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` is unreachable from the loss.
    pub fn get(&self, var: Var) -> Tensor {
        assert_eq!(var.graph, self.graph, "variable from a different graph");
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index]),
        }
    }

    /// Takes ownership of the gradient buffer for `var`.
    pub fn take(&mut self, var: Var) -> Tensor {
        assert_eq!(var.graph, self.graph, "variable from a different graph");
        match self.grads[var.index].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.index]),
        }
    }

    /// Whether any gradient was accumulated into `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.index].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), contrib).expect("gradient shape")),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from a different graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Dispatches a primitive by kind.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul
            | Primitive::MatMulT
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::RmsNorm { .. } => 2,
            Primitive::CausalAttention => 3,
            Primitive::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{} expects {} inputs, got {}",
                prim.name(),
                arity,
                inputs.len()
            )));
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::MatMulT => self.matmul_t(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Scale(c) => self.scale(inputs[0], *c),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Gelu => self.gelu(inputs[0]),
            Primitive::Silu => self.silu(inputs[0]),
            Primitive::RmsNorm { eps } => self.rms_norm(inputs[0], inputs[1], *eps),
            Primitive::L2NormalizeRows { eps } => self.l2_normalize_rows(inputs[0], *eps),
            Primitive::RowSoftmax => self.row_softmax(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::SumLastDim => self.sum_last_dim(inputs[0]),
            Primitive::LogSumExpLastDim => self.logsumexp_last_dim(inputs[0]),
            Primitive::GatherRows { ids, prefix } => self.gather_rows(inputs[0], ids, prefix),
            Primitive::PickPerRow { index } => self.pick_per_row(inputs[0], index),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Concat => self.concat_last(inputs),
            Primitive::Reshape(shape) => self.reshape(inputs[0], shape),
            Primitive::Rope { base } => self.rope(inputs[0], *base),
            Primitive::CausalAttention => self.causal_attention(inputs[0], inputs[1], inputs[2]),
        }
    }

    /// `a: [..., k] · b: [k, n] -> [..., n]`; a 1-D `b` of length `k` yields `[...]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let vec_rhs = bv.shape().len() == 1;
        if av.shape().is_empty() || !(vec_rhs || bv.shape().len() == 2) {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let k = av.last_dim();
        let (bk, n) = if vec_rhs {
            (bv.shape()[0], 1)
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(av.data(), k), MatRef::rows(bv.data(), n), 0.0, &mut out, n, 1);
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        if !vec_rhs {
            shape.push(n);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[ai, bi]);
        self.push("matmul", value, Op::MatMul { a: ai, b: bi, vec_rhs }, rg)
    }

    /// `a: [..., k] · bᵀ` with `b: [n, k]`, giving `[..., n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape().is_empty() || bv.shape().len() != 2 || av.last_dim() != bv.shape()[1] {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (k, n, m) = (av.last_dim(), bv.shape()[0], av.rows());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(av.data(), k),
            MatRef::transposed(bv.data(), k),
            0.0,
            &mut out,
            n,
            1,
        );
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[ai, bi]);
        self.push("matmul_t", value, Op::MatMulT { a: ai, b: bi }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let src = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[xi]);
        self.push("transpose", value, Op::Transpose { x: xi }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        same_shape(name, av, bv)?;
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[ai, bi]);
        self.push(name, value, make(ai, bi), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, make: impl Fn(usize) -> Op) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(f);
        let rg = self.rg(&[xi]);
        self.push(name, value, make(xi), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, |x| Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, |x| Op::Gelu { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), |x| Op::Silu { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, |x| Op::Log { x })
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xi, gi) = (self.check(x)?, self.check(gain)?);
        let (xv, gv) = (&self.nodes[xi].value, &self.nodes[gi].value);
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &v), &g) in o.iter_mut().zip(row).zip(gv.data()) {
                *o = v * r * g;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi, gi]);
        self.push("rms_norm", value, Op::RmsNorm { x: xi, gain: gi, inv_rms }, rg)
    }

    /// Row-wise `x / max(‖x‖, eps)` over the last dimension.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        let mut out = vec![0.0; xv.len()];
        let mut inv_norm = Vec::with_capacity(xv.rows());
        let mut clamped = Vec::with_capacity(xv.rows());
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let c = n <= eps;
            let inv = if c { 1.0 / eps } else { 1.0 / n };
            inv_norm.push(inv);
            clamped.push(c);
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push("l2_normalize_rows", value, Op::L2Normalize { x: xi, inv_norm, clamped }, rg)
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_into(row, o);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push("row_softmax", value, Op::Softmax { x: xi }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let lse = logsumexp(row);
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push("log_softmax", value, Op::LogSoftmax { x: xi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.nodes[xi].value.sum());
        let rg = self.rg(&[xi]);
        self.push("sum", value, Op::Sum { x: xi }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(&[xi]);
        self.push("mean", value, Op::Mean { x: xi }, rg)
    }

    /// `[..., d] -> [...]`.
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        let out: Vec<f64> = xv.data().chunks_exact(d).map(|r| r.iter().sum()).collect();
        let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        self.push("sum_last_dim", value, Op::SumLastDim { x: xi }, rg)
    }

    /// Stable `log Σ exp` over the last dimension, `[..., d] -> [...]`.
    pub fn logsumexp_last_dim(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        let out: Vec<f64> = xv.data().chunks_exact(d).map(logsumexp).collect();
        let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        self.push("logsumexp_last_dim", value, Op::LogSumExp { x: xi }, rg)
    }

    /// Embedding lookup: rows of `table: [V, d]` selected by `ids`, shaped `prefix ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        if tv.shape().len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: tv.shape().to_vec(),
                rhs: prefix.to_vec(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::invalid(format!(
                    "gather_rows: id {id} at position {pos} out of range for {v} rows"
                )));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[ti]);
        self.push("gather_rows", value, Op::GatherRows { table: ti, ids: ids.to_vec() }, rg)
    }

    /// `out[r] = x[r, index[r]]` for `x: [..., V]`.
    pub fn pick_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        if xv.rows() != index.len() {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: xv.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let mut out = Vec::with_capacity(index.len());
        for (r, &j) in index.iter().enumerate() {
            if j >= d {
                return Err(Error::invalid(format!(
                    "pick_per_row: index {j} at row {r} out of range for width {d}"
                )));
            }
            out.push(xv.data()[r * d + j]);
        }
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        self.push("pick_per_row", value, Op::PickPerRow { x: xi, index: index.to_vec() }, rg)
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = &self.nodes[idx[0]].value;
        let lead = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let rows = first.rows();
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape().len() != first.shape().len() || v.shape()[..v.shape().len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&i, &w) in idx.iter().zip(&widths) {
            let src = self.nodes[i].value.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&idx);
        let parts = idx.into_iter().zip(widths).collect();
        self.push("concat", value, Op::Concat { parts }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.rg(&[xi]);
        self.push("reshape", value, Op::Reshape { x: xi }, rg)
    }

    /// Rotary position embedding on `x: [B, T, H, hd]`, pairing dimension `i` with `i + hd/2`.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 4 || s[3] % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (b, t, h, hd) = (s[0], s[1], s[2], s[3]);
        let half = hd / 2;
        let mut cos = vec![0.0; t * half];
        let mut sin = vec![0.0; t * half];
        for pos in 0..t {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / hd as f64);
                let angle = pos as f64 * freq;
                cos[pos * half + i] = angle.cos();
                sin[pos * half + i] = angle.sin();
            }
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for pos in 0..t {
                for hi in 0..h {
                    let off = ((bi * t + pos) * h + hi) * hd;
                    for i in 0..half {
                        let (c, sn) = (cos[pos * half + i], sin[pos * half + i]);
                        let (x1, x2) = (src[off + i], src[off + half + i]);
                        out[off + i] = x1 * c - x2 * sn;
                        out[off + half + i] = x1 * sn + x2 * c;
                    }
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push(
            "rope",
            value,
            Op::Rope {
                x: xi,
                cos,
                sin,
                seq: t,
                heads: h,
                head_dim: hd,
            },
            rg,
        )
    }

    /// Scaled dot-product attention with a causal mask.
    ///
    /// `q: [B, T, H, hd]`, `k, v: [B, T, Hkv, hd]` with `H % Hkv == 0`; query head
    /// `h` reads key/value head `h / (H / Hkv)`. Output is `[B, T, H, hd]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let (qs, ks) = (qv.shape(), kv.shape());
        let bad = qs.len() != 4
            || ks.len() != 4
            || vv.shape() != ks
            || qs[0] != ks[0]
            || qs[1] != ks[1]
            || qs[3] != ks[3]
            || ks[2] == 0
            || qs[2] % ks[2] != 0;
        if bad {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: qs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let dims = AttnDims {
            batch: qs[0],
            seq: qs[1],
            heads: qs[2],
            kv_heads: ks[2],
            head_dim: qs[3],
        };
        let AttnDims {
            batch,
            seq: t,
            heads: h,
            kv_heads: hkv,
            head_dim: hd,
        } = dims;
        let group = h / hkv;
        let scale = 1.0 / (hd as f64).sqrt();
        let q_rs = h * hd;
        let kv_rs = hkv * hd;
        let mut probs = vec![0.0; batch * h * t * t];
        let mut out = vec![0.0; qv.len()];
        for b in 0..batch {
            for head in 0..h {
                let kvh = head / group;
                let qoff = b * t * q_rs + head * hd;
                let koff = b * t * kv_rs + kvh * hd;
                let p = &mut probs[(b * h + head) * t * t..(b * h + head + 1) * t * t];
                gemm(
                    t,
                    hd,
                    t,
                    MatRef::strided(&qv.data()[qoff..], q_rs, 1),
                    MatRef::strided(&kv.data()[koff..], 1, kv_rs),
                    0.0,
                    p,
                    t,
                    1,
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for v in row[..=i].iter_mut() {
                        *v *= scale;
                        max = max.max(*v);
                    }
                    let mut z = 0.0;
                    for v in row[..=i].iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    for v in row[..=i].iter_mut() {
                        *v /= z;
                    }
                    for v in row[i + 1..].iter_mut() {
                        *v = 0.0;
                    }
                }
                gemm(
                    t,
                    t,
                    hd,
                    MatRef::rows(p, t),
                    MatRef::strided(&vv.data()[koff..], kv_rs, 1),
                    0.0,
                    &mut out[qoff..],
                    q_rs,
                    1,
                );
            }
        }
        let value = Tensor::new(qs.to_vec(), out)?;
        let rg = self.rg(&[qi, ki, vi]);
        self.push(
            "causal_attention",
            value,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                probs,
                dims,
            },
            rg,
        )
    }

    /// Linear interpolation of the last dimension according to `plan`.
    pub fn interpolate_last_dim(&mut self, x: Var, plan: Arc<InterpolationPlan>) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.last_dim() != plan.source_dim() {
            return Err(Error::Shape {
                op: "interpolate",
                lhs: xv.shape().to_vec(),
                rhs: vec![plan.source_dim()],
            });
        }
        let dt = plan.target_dim();
        let mut out = Vec::with_capacity(xv.rows() * dt);
        for row in xv.data().chunks_exact(plan.source_dim()) {
            out.extend(plan.apply_row(row));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = dt;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        self.push("interpolate", value, Op::Interpolate { x: xi, plan }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn shape_of(&self, i: usize) -> Vec<usize> {
        self.nodes[i].value.shape().to_vec()
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let g = gout.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, vec_rhs } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let k = av.last_dim();
                let m = av.rows();
                let n = if *vec_rhs { 1 } else { bv.shape()[1] };
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(bv.data(), n), 0.0, &mut da, k, 1);
                    accumulate(&mut grads[*a], av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::transposed(av.data(), k), MatRef::rows(g, n), 0.0, &mut db, n, 1);
                    accumulate(&mut grads[*b], bv.shape(), db);
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (k, n, m) = (av.last_dim(), bv.shape()[0], av.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::rows(g, n), MatRef::rows(bv.data(), k), 0.0, &mut da, k, 1);
                    accumulate(&mut grads[*a], av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, MatRef::transposed(g, n), MatRef::rows(av.data(), k), 0.0, &mut db, k, 1);
                    accumulate(&mut grads[*b], bv.shape(), db);
                }
            }
            Op::Transpose { x } => {
                let s = self.shape_of(*x);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[*x], &s, dx);
            }
            Op::Add { a, b } => {
                for &t in [a, b] {
                    if self.wants(t) {
                        accumulate(&mut grads[t], &self.shape_of(t), g.to_vec());
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[*a], &self.shape_of(*a), g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[*b], &self.shape_of(*b), g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    accumulate(&mut grads[*a], &self.shape_of(*a), da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads[*b], &self.shape_of(*b), db);
                }
            }
            Op::Scale { x, c } => {
                accumulate(&mut grads[*x], &self.shape_of(*x), g.iter().map(|v| v * c).collect());
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Gelu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Silu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Log { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.data();
                let d = xv.last_dim();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for ((row, gr), &r) in xv.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for ((acc, &v), &go) in dg.iter_mut().zip(row).zip(gr) {
                            *acc += go * v * r;
                        }
                    }
                    accumulate(&mut grads[*gain], &[d], dg);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (((row, gr), &r), o) in xv
                        .data()
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(inv_rms)
                        .zip(dx.chunks_exact_mut(d))
                    {
                        let dot: f64 = row.iter().zip(gr).zip(gv).map(|((v, go), gn)| v * go * gn).sum();
                        let coef = r * r * r * dot / d as f64;
                        for (((o, &v), &go), &gn) in o.iter_mut().zip(row).zip(gr).zip(gv) {
                            *o = r * go * gn - v * coef;
                        }
                    }
                    accumulate(&mut grads[*x], xv.shape(), dx);
                }
            }
            Op::L2Normalize { x, inv_norm, clamped } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((((yr, gr), &inv), &c), o) in y
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(inv_norm)
                    .zip(clamped)
                    .zip(dx.chunks_exact_mut(d))
                {
                    if c {
                        for (o, &go) in o.iter_mut().zip(gr) {
                            *o = go * inv;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &go) in o.iter_mut().zip(yr).zip(gr) {
                            *o = (go - yv * dot) * inv;
                        }
                    }
                }
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Softmax { x } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &go) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (go - dot);
                    }
                }
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::LogSoftmax { x } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &yv), &go) in o.iter_mut().zip(yr).zip(gr) {
                        *o = go - yv.exp() * total;
                    }
                }
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.len();
                accumulate(&mut grads[*x], &self.shape_of(*x), vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].value.len();
                accumulate(&mut grads[*x], &self.shape_of(*x), vec![g[0] / n as f64; n]);
            }
            Op::SumLastDim { x } => {
                let d = self.nodes[*x].value.last_dim();
                let dx = g.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::LogSumExp { x } => {
                let xv = &self.nodes[*x].value;
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (((row, &lse), &go), o) in xv.data().chunks_exact(d).zip(y).zip(g).zip(dx.chunks_exact_mut(d)) {
                    for (o, &v) in o.iter_mut().zip(row) {
                        *o = go * (v - lse).exp();
                    }
                }
                accumulate(&mut grads[*x], xv.shape(), dx);
            }
            Op::GatherRows { table, ids } => {
                let s = self.shape_of(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (gr, &id) in g.chunks_exact(d).zip(ids) {
                    for (acc, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                        *acc += v;
                    }
                }
                accumulate(&mut grads[*table], &s, dt);
            }
            Op::PickPerRow { x, index } => {
                let s = self.shape_of(*x);
                let d = *s.last().expect("non-scalar");
                let mut dx = vec![0.0; s.iter().product()];
                for (r, (&j, &go)) in index.iter().zip(g).enumerate() {
                    dx[r * d + j] = go;
                }
                accumulate(&mut grads[*x], &s, dx);
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p], &self.shape_of(p), dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                accumulate(&mut grads[*x], &self.shape_of(*x), g.to_vec());
            }
            Op::Rope {
                x,
                cos,
                sin,
                seq,
                heads,
                head_dim,
            } => {
                let half = head_dim / 2;
                let mut dx = vec![0.0; g.len()];
                let per_batch = seq * heads * head_dim;
                for (bg, bo) in g.chunks_exact(per_batch).zip(dx.chunks_exact_mut(per_batch)) {
                    for pos in 0..*seq {
                        for hi in 0..*heads {
                            let off = (pos * heads + hi) * head_dim;
                            for i in 0..half {
                                let (c, sn) = (cos[pos * half + i], sin[pos * half + i]);
                                let (g1, g2) = (bg[off + i], bg[off + half + i]);
                                bo[off + i] = g1 * c + g2 * sn;
                                bo[off + half + i] = -g1 * sn + g2 * c;
                            }
                        }
                    }
                }
                accumulate(&mut grads[*x], &self.shape_of(*x), dx);
            }
            Op::Attention { q, k, v, probs, dims } => {
                self.attention_backward(*q, *k, *v, probs, *dims, g, grads);
            }
            Op::Interpolate { x, plan } => {
                let s = self.shape_of(*x);
                let (ds, dt) = (plan.source_dim(), plan.target_dim());
                let rows = g.len() / dt;
                let mut dx = vec![0.0; rows * ds];
                for (gr, o) in g.chunks_exact(dt).zip(dx.chunks_exact_mut(ds)) {
                    plan.scatter_row(gr, o);
                }
                accumulate(&mut grads[*x], &s, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        probs: &[f64],
        dims: AttnDims,
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let AttnDims {
            batch,
            seq: t,
            heads: h,
            kv_heads: hkv,
            head_dim: hd,
        } = dims;
        let group = h / hkv;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let q_rs = h * hd;
        let kv_rs = hkv * hd;
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t * t];
        for b in 0..batch {
            for head in 0..h {
                let kvh = head / group;
                let qoff = b * t * q_rs + head * hd;
                let koff = b * t * kv_rs + kvh * hd;
                let p = &probs[(b * h + head) * t * t..(b * h + head + 1) * t * t];
                // dV += Pᵀ · dO
                gemm(
                    t,
                    t,
                    hd,
                    MatRef::transposed(p, t),
                    MatRef::strided(&g[qoff..], q_rs, 1),
                    1.0,
                    &mut dv[koff..],
                    kv_rs,
                    1,
                );
                // dP = dO · Vᵀ
                gemm(
                    t,
                    hd,
                    t,
                    MatRef::strided(&g[qoff..], q_rs, 1),
                    MatRef::strided(&vv.data()[koff..], 1, kv_rs),
                    0.0,
                    &mut dp,
                    t,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    for v in dr[i + 1..].iter_mut() {
                        *v = 0.0;
                    }
                }
                // dQ = dS · K
                gemm(
                    t,
                    t,
                    hd,
                    MatRef::rows(&dp, t),
                    MatRef::strided(&kv.data()[koff..], kv_rs, 1),
                    0.0,
                    &mut dq[qoff..],
                    q_rs,
                    1,
                );
                // dK += dSᵀ · Q
                gemm(
                    t,
                    t,
                    hd,
                    MatRef::transposed(&dp, t),
                    MatRef::strided(&qv.data()[qoff..], q_rs, 1),
                    1.0,
                    &mut dk[koff..],
                    kv_rs,
                    1,
                );
            }
        }
        if self.wants(q) {
            accumulate(&mut grads[q], qv.shape(), dq);
        }
        if self.wants(k) {
            accumulate(&mut grads[k], kv.shape(), dk);
        }
        if self.wants(v) {
            accumulate(&mut grads[v], vv.shape(), dv);
        }
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
