//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every op appends one node holding its output value. Nodes only reference
//! earlier nodes, so construction order is a topological order and backward is
//! a single reverse sweep.

use std::fmt;

use super::kernels::conv::{self, Conv2dParams, ConvGeometry};
use super::kernels::elementwise::{self, split_axis};
use super::kernels::gemm::gemm;
use super::kernels::{bilinear, norm};
use super::{check_shape, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family of a node; used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    MulConst,
    Reshape,
    Permute,
    Narrow,
    Concat,
    Linear,
    MatMul,
    Conv2d,
    LayerNorm,
    ChannelNorm,
    Softmax,
    Gelu,
    Sigmoid,
    BilinearSample,
    Mean,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Mul,
        OpKind::MulConst,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::Linear,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::LayerNorm,
        OpKind::ChannelNorm,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::BilinearSample,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MulConst => "mul_const",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ChannelNorm => "channel_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scales the backward rule of every node of `kind` by `factor`.
///
/// A deliberately wrong gradient for negative-control runs of the checkers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub factor: f64,
}

enum Op<T> {
    Leaf,
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    MulConst {
        x: Var,
        c: T,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Bilinear {
        input: Var,
        coords: Var,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ChannelNorm { .. } => OpKind::ChannelNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Bilinear { .. } => OpKind::BilinearSample,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    flops: u64,
    scope: Option<usize>,
}

/// A single-owner recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
    scopes: Vec<String>,
    scope: Option<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`]. Only leaves retain theirs.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient as a tensor; zeros when the leaf did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => {
                let n = numel(&shape);
                Tensor::from_parts(shape, vec![T::zero(); n])
            }
        }
    }
}

fn broadcast_map(out: &[usize], rhs: &[usize]) -> Result<Option<Vec<usize>>> {
    if out == rhs {
        return Ok(None);
    }
    if rhs.len() > out.len() {
        return Err(Error::invalid(format!("cannot broadcast {rhs:?} to {out:?}")));
    }
    let pad = out.len() - rhs.len();
    let mut full = vec![1; pad];
    full.extend_from_slice(rhs);
    for (&o, &r) in out.iter().zip(&full) {
        if r != o && r != 1 {
            return Err(Error::invalid(format!("cannot broadcast {rhs:?} to {out:?}")));
        }
    }
    let mut strides = vec![0usize; full.len()];
    let mut acc = 1;
    for d in (0..full.len()).rev() {
        strides[d] = if full[d] == 1 { 0 } else { acc };
        acc *= full[d];
    }
    let mut map = Vec::with_capacity(numel(out));
    let mut idx = vec![0usize; out.len()];
    for _ in 0..numel(out) {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
            scopes: Vec::new(),
            scope: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attributes subsequent nodes' FLOPs to `name`.
    pub fn set_scope(&mut self, name: &str) {
        let idx = match self.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
        self.scope = Some(idx);
    }

    pub fn clear_scope(&mut self) {
        self.scope = None;
    }

    /// Forward FLOPs per scope, in first-seen order; unscoped nodes are omitted.
    pub fn flops_by_scope(&self) -> Vec<(String, u64)> {
        let mut totals = vec![0u64; self.scopes.len()];
        for n in &self.nodes {
            if let Some(s) = n.scope {
                totals[s] += n.flops;
            }
        }
        self.scopes.iter().cloned().zip(totals).collect()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool, flops: u64) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            flops,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf; it participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
            0,
        )
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true, 0)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false, 0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.data.clone())
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    // ----- elementwise -------------------------------------------------

    /// `lhs + rhs`, with `rhs` broadcast to `lhs`'s shape.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.shape(lhs).to_vec();
        let map = broadcast_map(&shape, self.shape(rhs))?;
        let (a, b) = (self.data(lhs), self.data(rhs));
        let data: Vec<T> = match &map {
            None => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
            Some(m) => a.iter().zip(m).map(|(&x, &j)| x + b[j]).collect(),
        };
        let n = data.len() as u64;
        let ng = self.needs(&[lhs, rhs]);
        Ok(self.push(shape, data, Op::Add { lhs, rhs }, ng, n))
    }

    /// `lhs * rhs` elementwise, with `rhs` broadcast to `lhs`'s shape.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.shape(lhs).to_vec();
        let map = broadcast_map(&shape, self.shape(rhs))?;
        let (a, b) = (self.data(lhs), self.data(rhs));
        let data: Vec<T> = match &map {
            None => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
            Some(m) => a.iter().zip(m).map(|(&x, &j)| x * b[j]).collect(),
        };
        let n = data.len() as u64;
        let ng = self.needs(&[lhs, rhs]);
        Ok(self.push(shape, data, Op::Mul { lhs, rhs }, ng, n))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        let ng = self.needs(&[x]);
        self.push(shape, data, Op::MulConst { x, c }, ng, n)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.data(x).iter().map(|&v| elementwise::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        let ng = self.needs(&[x]);
        self.push(shape, data, Op::Gelu { x }, ng, 8 * n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.data(x).iter().map(|&v| elementwise::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        let ng = self.needs(&[x]);
        self.push(shape, data, Op::Sigmoid { x }, ng, 4 * n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let data = elementwise::softmax(self.data(x), split_axis(&shape, axis));
        let n = data.len() as u64;
        let ng = self.needs(&[x]);
        Ok(self.push(shape, data, Op::Softmax { x, axis }, ng, 4 * n))
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.data(x).len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, ng, 0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "{perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let (data, out_shape) = permute_data(self.data(x), shape, perm);
        let ng = self.needs(&[x]);
        Ok(self.push(out_shape, data, Op::Permute { x, perm: perm.to_vec() }, ng, 0))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(&[x]);
        Ok(self.push(out_shape, data, Op::Narrow { x, axis, start }, ng, 0))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(Error::invalid(format!(
                    "concat shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                data.extend_from_slice(&self.data(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.needs(parts);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
            0,
        ))
    }

    // ----- reductions ----------------------------------------------------

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let scale = T::one() / T::of(dim as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let n = src.len() as u64;
        let ng = self.needs(&[x]);
        Ok(self.push(out_shape, data, Op::Mean { x, axis }, ng, n))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.data(x).iter().copied().sum();
        let n = self.data(x).len() as u64;
        let ng = self.needs(&[x]);
        self.push(Vec::new(), vec![total], Op::Sum { x }, ng, n)
    }

    // ----- dense ops -----------------------------------------------------

    /// Affine map over the trailing axis: `x[..,Din] · W[Dout,Din]^T + b[Dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&din, [dout, wdin]) = (
            xs.last().ok_or_else(|| Error::invalid("linear on a scalar"))?,
            ws.as_slice(),
        ) else {
            return Err(Error::invalid(format!("linear weight must be [Dout,Din], got {ws:?}")));
        };
        let (dout, wdin) = (*dout, *wdin);
        if din != wdin {
            return Err(Error::invalid(format!(
                "linear input extent {din} does not match weight {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::invalid(format!(
                    "linear bias must be [{dout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.data(x).len() / din;
        let mut data = vec![T::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.data(x),
            false,
            self.data(weight),
            true,
            &mut data,
            false,
        );
        if let Some(b) = bias {
            let bv = self.data(b);
            for row in data.chunks_exact_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = dout;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let ng = self.needs(&deps);
        let flops = 2 * (rows * din * dout) as u64;
        Ok(self.push(shape, data, Op::Linear { x, weight, bias }, ng, flops))
    }

    /// Batched matrix product over identical leading dims:
    /// `a[..,M,K] · b[..,K,N]`, or `a[..,M,K] · b[..,N,K]^T` with `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::invalid(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::invalid(format!(
                "matmul inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let ng = self.needs(&[a, b]);
        let flops = 2 * (batch * m * k * n) as u64;
        Ok(self.push(shape, data, Op::MatMul { a, b, trans_b }, ng, flops))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let geom = ConvGeometry::resolve(self.shape(x), self.shape(weight), params)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::invalid(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.out_channels,
                    self.shape(b)
                )));
            }
        }
        let data = conv::forward(&geom, self.data(x), self.data(weight), bias.map(|b| self.data(b)));
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            geom.output_shape(),
            data,
            Op::Conv2d { x, weight, bias, geom },
            ng,
            2 * geom.macs(),
        ))
    }

    // ----- normalization -------------------------------------------------

    /// Normalizes over the trailing axis, then applies `gamma[D]`, `beta[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::invalid(format!("layer_norm affine params must be [{d}]")));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (x_hat, inv_std) = norm::normalize_rows(self.data(x), d, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let data: Vec<T> = x_hat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let ng = self.needs(&[x, gamma, beta]);
        let n = data.len() as u64;
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            ng,
            7 * n,
        ))
    }

    /// For `x[B,C,H,W]`, normalizes each channel over its spatial positions,
    /// then applies per-channel `gamma[C]`, `beta[C]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [_, c, h, w] = *shape.as_slice() else {
            return Err(Error::invalid(format!(
                "channel_norm input must be [B,C,H,W], got {shape:?}"
            )));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::invalid(format!("channel_norm affine params must be [{c}]")));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("channel_norm eps must be positive"));
        }
        let area = h * w;
        let (x_hat, inv_std) = norm::normalize_rows(self.data(x), area, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let data: Vec<T> = x_hat
            .chunks_exact(area)
            .enumerate()
            .flat_map(|(r, row)| {
                let (gc, bc) = (g[r % c], b[r % c]);
                row.iter().map(move |&v| v * gc + bc)
            })
            .collect();
        let ng = self.needs(&[x, gamma, beta]);
        let n = data.len() as u64;
        Ok(self.push(
            shape,
            data,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            ng,
            7 * n,
        ))
    }

    // ----- sampling ------------------------------------------------------

    /// Bilinear samples of `input[B,C,H,W]` at absolute `coords[B,L,2]` (row, col),
    /// clamped to the border. Output is `[B,C,L]`.
    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let [b, c, h, w] = *s.as_slice() else {
            return Err(Error::invalid(format!(
                "bilinear_sample input must be [B,C,H,W], got {s:?}"
            )));
        };
        let cs = self.shape(coords).to_vec();
        let [cb, l, 2] = *cs.as_slice() else {
            return Err(Error::invalid(format!(
                "bilinear_sample coords must be [B,L,2], got {cs:?}"
            )));
        };
        if cb != b {
            return Err(Error::invalid(format!("bilinear_sample batch mismatch: {b} vs {cb}")));
        }
        if self.data(coords).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("bilinear_sample got non-finite coordinates"));
        }
        let data = bilinear::forward(self.data(input), [b, c, h, w], self.data(coords), l);
        let ng = self.needs(&[input, coords]);
        Ok(self.push(
            vec![b, c, l],
            data,
            Op::Bilinear { input, coords },
            ng,
            (8 * b * c * l) as u64,
        ))
    }

    // ----- loss ----------------------------------------------------------

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, k] = *s.as_slice() else {
            return Err(Error::invalid(format!("cross_entropy logits must be [B,K], got {s:?}")));
        };
        if labels.len() != b {
            return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} >= num classes {k}")));
        }
        let probs = elementwise::softmax(self.data(logits), (b, k, 1));
        let z = self.data(logits);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let loss = total / T::of(b as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
            (5 * b * k) as u64,
        ))
    }

    // ----- backward ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.node(loss);
        if n.data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(f) = self.fault.filter(|f| f.kind == node.op.kind()) {
                let s = T::of(f.factor);
                g.iter_mut().for_each(|v| *v *= s);
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    add_into(&mut grads[lhs.0], g.to_vec());
                }
                if self.wants(*rhs) {
                    let rs = self.shape(*rhs);
                    match broadcast_map(&node.shape, rs).expect("checked in forward") {
                        None => add_into(&mut grads[rhs.0], g.to_vec()),
                        Some(map) => accumulate(&mut grads[rhs.0], numel(rs), |buf| {
                            for (&gi, &j) in g.iter().zip(&map) {
                                buf[j] += gi;
                            }
                        }),
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.data(*lhs), self.data(*rhs));
                let rs = self.shape(*rhs);
                let map = broadcast_map(&node.shape, rs).expect("checked in forward");
                let rhs_at = |i: usize| map.as_ref().map_or(i, |m| m[i]);
                if self.wants(*lhs) {
                    let contrib = g.iter().enumerate().map(|(i, &gi)| gi * b[rhs_at(i)]).collect();
                    add_into(&mut grads[lhs.0], contrib);
                }
                if self.wants(*rhs) {
                    accumulate(&mut grads[rhs.0], numel(rs), |buf| {
                        for (i, (&gi, &ai)) in g.iter().zip(a).enumerate() {
                            buf[rhs_at(i)] += gi * ai;
                        }
                    });
                }
            }
            Op::MulConst { x, c } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let (back, _) = permute_data(g, &node.shape, &invert(perm));
                    add_into(&mut grads[x.0], back);
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, dim, inner) = split_axis(xs, *axis);
                    let len = node.shape[*axis];
                    accumulate(&mut grads[x.0], numel(xs), |buf| {
                        for o in 0..outer {
                            let dst = (o * dim + start) * inner;
                            let src = o * len * inner;
                            for (d, &s) in buf[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut contrib = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            contrib.extend_from_slice(&g[src..src + d * inner]);
                        }
                        add_into(&mut grads[p.0], contrib);
                    }
                    offset += d;
                }
            }
            Op::Mean { x, axis } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, dim, inner) = split_axis(xs, *axis);
                    let scale = T::one() / T::of(dim as f64);
                    accumulate(&mut grads[x.0], numel(xs), |buf| {
                        for o in 0..outer {
                            for d in 0..dim {
                                let dst = &mut buf[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                                for (b, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *b += gv * scale;
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let len = self.data(*x).len();
                    let gv = g[0];
                    accumulate(&mut grads[x.0], len, |buf| buf.iter_mut().for_each(|b| *b += gv));
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let contrib = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| gv * elementwise::gelu_grad(xv))
                        .collect();
                    add_into(&mut grads[x.0], contrib);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let contrib = node
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect();
                    add_into(&mut grads[x.0], contrib);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let contrib = elementwise::softmax_backward(&node.data, g, split_axis(&node.shape, *axis));
                    add_into(&mut grads[x.0], contrib);
                }
            }
            Op::Linear { x, weight, bias } => {
                let din = *self.shape(*x).last().expect("rank >= 1");
                let dout = *node.shape.last().expect("rank >= 1");
                let rows = g.len() / dout;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, g, false, self.data(*weight), false, &mut gx, false);
                    add_into(&mut grads[x.0], gx);
                }
                if self.wants(*weight) {
                    let xd = self.data(*x);
                    accumulate(&mut grads[weight.0], dout * din, |buf| {
                        gemm(dout, rows, din, g, true, xd, false, buf, true);
                    });
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(&mut grads[b.0], dout, |buf| {
                        for row in g.chunks_exact(dout) {
                            buf.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.shape[r - 1];
                let batch = g.len() / (m * n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // ga = g · op(b)^T
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let (gx, gw, gb) = conv::backward(geom, self.data(*x), self.data(*weight), g);
                if self.wants(*x) {
                    add_into(&mut grads[x.0], gx);
                }
                if self.wants(*weight) {
                    add_into(&mut grads[weight.0], gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let gm = self.data(*gamma);
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], d, |buf| {
                        for (gr, xr) in g.chunks_exact(d).zip(x_hat.chunks_exact(d)) {
                            for ((b, &gv), &xv) in buf.iter_mut().zip(gr).zip(xr) {
                                *b += gv * xv;
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], d, |buf| {
                        for gr in g.chunks_exact(d) {
                            buf.iter_mut().zip(gr).for_each(|(b, &gv)| *b += gv);
                        }
                    });
                }
                if self.wants(*x) {
                    let gxh: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * gm[i % d]).collect();
                    add_into(&mut grads[x.0], norm::normalize_rows_backward(&gxh, x_hat, inv_std, d));
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let c = node.shape[1];
                let area = node.shape[2] * node.shape[3];
                let gm = self.data(*gamma);
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |buf| {
                        for (r, (gr, xr)) in g.chunks_exact(area).zip(x_hat.chunks_exact(area)).enumerate() {
                            buf[r % c] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], c, |buf| {
                        for (r, gr) in g.chunks_exact(area).enumerate() {
                            buf[r % c] += gr.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.wants(*x) {
                    let gxh: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * gm[(i / area) % c]).collect();
                    add_into(
                        &mut grads[x.0],
                        norm::normalize_rows_backward(&gxh, x_hat, inv_std, area),
                    );
                }
            }
            Op::Bilinear { input, coords } => {
                let s = self.shape(*input);
                let dims = [s[0], s[1], s[2], s[3]];
                let l = node.shape[2];
                let (gi, gc) = bilinear::backward(self.data(*input), dims, self.data(*coords), l, g);
                if self.wants(*input) {
                    add_into(&mut grads[input.0], gi);
                }
                if self.wants(*coords) {
                    add_into(&mut grads[coords.0], gc);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut contrib: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        contrib[i * k + y] -= scale;
                    }
                    add_into(&mut grads[logits.0], contrib);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_gives_ones_and_square_gives_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        assert_eq!(tape.backward(s2).unwrap().get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = gelu(x) + 3x  ⇒  dy/dx = gelu'(x) + 3
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.3, -1.1]));
        let a = tape.gelu(x);
        let b = tape.mul_const(x, 3.0);
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (i, &xv) in [0.3, -1.1].iter().enumerate() {
            let want = elementwise::gelu_grad(xv) + 3.0;
            assert!((g.get(x).unwrap()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn linear_hand_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
        let w = tape.constant(&Tensor::from_f64([2, 2], &[1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = tape.constant(&Tensor::zeros([2]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[3.0, -1.0]);
        let bad = tape.constant(&Tensor::zeros([3, 3]).unwrap());
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn permute_round_trip_and_validation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_fn([2, 3, 4], |i| i as f64).unwrap());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
        // element [1,2,3] of x lands at [3,1,2] of p
        assert_eq!(
            tape.value(p).at(&[3, 1, 2]).unwrap(),
            tape.value(x).at(&[1, 2, 3]).unwrap()
        );
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_fn([2, 5, 3], |i| i as f64).unwrap());
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(c), tape.data(x));
        assert!(tape.narrow(x, 1, 4, 2).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64([3], &[0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x = tape.constant(&Tensor::from_f64([2], &[2f64.ln(), 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.data(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(&Tensor::from_f64([2], &[1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-15 && tape.data(y)[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(&Tensor::zeros([2, 4]).unwrap());
        let l = tape.cross_entropy(z, &[1, 3]).unwrap();
        assert!((tape.data(l)[0] - 4f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(z, &[0, 4]).is_err());
        let g = tape.backward(l).unwrap();
        // (softmax - onehot)/B
        assert!((g.get(z).unwrap()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.get(z).unwrap()[0] - 0.25 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fault_scales_named_rule() {
        let mut tape = Tape::with_fault(Fault {
            kind: OpKind::Gelu,
            factor: 2.0,
        });
        let x = tape.leaf(&t(&[1], &[0.7]));
        let y = tape.gelu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!((g.get(x).unwrap()[0] - 2.0 * elementwise::gelu_grad(0.7)).abs() < 1e-14);
    }

    #[test]
    fn op_kind_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(&Tensor::ones([2]).unwrap());
        let x = tape.param(&Tensor::ones([2]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    }
}
