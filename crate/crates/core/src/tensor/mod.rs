//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.
//!
//! Parameters live outside the graph as plain [`Tensor`] values. Each training
//! step binds them as leaves of a fresh [`Graph`], records the forward pass,
//! and consumes the graph in [`Graph::backward`]. Gradients come back as a
//! [`Gradients`] table keyed by leaf [`Var`]; callers fold them into
//! [`Tensor::grad`], so repeated backward passes accumulate until
//! [`Tensor::zero_grad`] is called.

mod gemm;
pub mod gradcheck;
mod ops;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub(crate) use gemm::gemm;
pub use gradcheck::{check_op, grad_check, relative_error, GradCheckEntry, GradCheckReport};

/// Fill value used by [`OpKind::CausalMaskedFill`] above the diagonal.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross-entropy mask selects no positions")]
    EmptyMask,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array of `f64` with an optional accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// 2-D tensor from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Normally distributed entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = dist.sample(rng));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `(len / cols) × cols`.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of {:?}", self.shape);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn value_copy(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families understood by the graph. Every kind has a forward and a
/// backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Sum,
    SoftmaxLastDim,
    LayerNorm,
    Gelu,
    EmbeddingLookup,
    ConcatRows,
    SliceRows,
    CrossEntropyMasked,
    Transpose2d,
    Reshape,
    CausalMaskedFill,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::SoftmaxLastDim,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::EmbeddingLookup,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::CrossEntropyMasked,
        OpKind::Transpose2d,
        OpKind::Reshape,
        OpKind::CausalMaskedFill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::CrossEntropyMasked => "cross_entropy_masked",
            OpKind::Transpose2d => "transpose_2d",
            OpKind::Reshape => "reshape",
            OpKind::CausalMaskedFill => "causal_masked_fill",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An operation together with its non-tensor attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[m,k] · [k,n]`.
    MatMul,
    /// Elementwise sum; the second operand may also be a `[n]` or `[1,n]`
    /// bias broadcast over the rows of the first.
    Add,
    Mul,
    Scale(f64),
    /// Sum of all elements to a scalar.
    Sum,
    SoftmaxLastDim,
    /// Inputs: `x`, gain `[d]`, bias `[d]`; normalizes over the last dim.
    LayerNorm { eps: f64 },
    /// Exact erf form.
    Gelu,
    /// Input: table `[V,d]`; output `[ids.len(), d]`.
    EmbeddingLookup { ids: Vec<usize> },
    /// Any number of `[m_i, d]` inputs stacked along rows.
    ConcatRows,
    SliceRows { start: usize, end: usize },
    /// Input: logits `[T,V]`; mean negative log-likelihood over masked rows.
    CrossEntropyMasked { labels: Vec<usize>, mask: Vec<bool> },
    Transpose2d,
    Reshape { shape: Vec<usize> },
    /// Square `[T,T]` scores; entries above the diagonal set to [`MASK_FILL`].
    CausalMaskedFill,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::SoftmaxLastDim => OpKind::SoftmaxLastDim,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::CrossEntropyMasked { .. } => OpKind::CrossEntropyMasked,
            Op::Transpose2d => OpKind::Transpose2d,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::CausalMaskedFill => OpKind::CausalMaskedFill,
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// A single-threaded computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records provenance for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A graph for forward-only evaluation; nothing requires grad.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, parents: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (a copy of `t`'s value).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let tracking = self.tracking;
        self.push(t.value_copy(), None, Vec::new(), tracking)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Tensor { grad: None, ..t }, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op kind that produced `v`, or `None` for leaves.
    pub fn op_kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.as_ref().map(Op::kind)
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].parents.iter().map(|&p| Var(p)).collect()
    }

    /// Record `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&op, &vals)?
        };
        let requires_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            Ok(self.push(value, Some(op), inputs.iter().map(|v| v.0).collect(), true))
        } else {
            Ok(self.push(value, None, Vec::new(), false))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxLastDim, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceRows { start, end }, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        self.apply(
            Op::CrossEntropyMasked {
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose2d, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        self.apply(Op::CausalMaskedFill, &[scores])
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; n];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                leaves[i] = Some(g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = ops::backward(op, &inputs, &node.value, &g, &needs);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it was unreachable or constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Fold the gradient of leaf `v` into `t.grad`. Unreachable leaves add zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => {
                if t.grad.is_none() {
                    t.grad = Some(vec![0.0; t.len()]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
