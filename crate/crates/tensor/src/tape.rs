//! Define-by-run computation tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough context to form the vector-Jacobian product. [`Tape::backward`] replays
//! the nodes in reverse and then clears the tape; [`Var`]s created before the
//! clear become stale and any further use of them panics.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) enum Op<F> {
    Leaf { param: Option<ParamId> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: F },
    OneMinus { x: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    ExpandBatch { x: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, dim: usize, mean: Vec<F>, rstd: Vec<F> },
    Relu { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Embedding { table: usize, indices: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<F>, counted: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample2x { x: usize },
    ReplaceRows { x: usize, token: usize, mask: Vec<bool> },
}

/// Records operations for one forward/backward pass.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    generation: Cell<u64>,
    check_finite: Cell<bool>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
    generation: u64,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<F> {
    generation: u64,
    loss: usize,
    leaves: HashMap<usize, Vec<F>>,
    params: HashMap<ParamId, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the loss with respect to `v`, when `v` is a leaf that required it
    /// (or the loss itself).
    pub fn get(&self, v: Var<'_, F>) -> Option<&[F]> {
        if v.generation != self.generation {
            return None;
        }
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn loss_id(&self) -> usize {
        self.loss
    }

    /// Moves parameter gradients into the store's grad buffers (accumulating).
    pub fn apply_to(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (&id, g) in &self.params {
            store.tensor_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            generation: Cell::new(0),
            check_finite: Cell::new(false),
        }
    }

    /// When enabled, every op output is scanned and a non-finite value is an error.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1, generation: self.generation.get() }
    }

    /// A leaf; gradients are tracked when the tensor's `requires_grad` flag is set.
    pub fn leaf(&self, t: Tensor<F>) -> Var<'_, F> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&self, mut t: Tensor<F>) -> Var<'_, F> {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node, generation: self.generation.get() };
        }
        let t = store.tensor(id);
        let rg = t.requires_grad();
        let mut value = Tensor::from_vec(t.shape(), t.data().to_vec()).expect("stored tensor is valid");
        value.set_requires_grad(rg);
        let v = self.push(value, Op::Leaf { param: Some(id) }, rg);
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    fn record<const N: usize>(
        &self,
        op_name: &'static str,
        inputs: [Var<'_, F>; N],
        compute: impl FnOnce(&[&Tensor<F>; N]) -> Result<(Tensor<F>, Op<F>)>,
    ) -> Result<Var<'_, F>> {
        let (value, op, rg) = {
            let nodes = self.nodes.borrow();
            let gen = self.generation.get();
            for v in &inputs {
                assert!(
                    std::ptr::eq(v.tape, self) && v.generation == gen && v.id < nodes.len(),
                    "stale or foreign Var used in `{op_name}`"
                );
            }
            let values: [&Tensor<F>; N] = std::array::from_fn(|i| &nodes[inputs[i].id].value);
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            let (value, op) = compute(&values)?;
            (value, op, rg)
        };
        if self.check_finite.get() {
            value.check_finite(op_name)?;
        }
        Ok(self.push(value, op, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var<'_, F>], axis: usize) -> Result<Var<'_, F>> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let gen = self.generation.get();
            for v in parts {
                assert!(v.generation == gen && std::ptr::eq(v.tape, self), "stale Var used in `concat`");
            }
            let first = &nodes[parts[0].id].value;
            if axis >= first.rank() {
                return Err(TensorError::Dimension { op: "concat", msg: format!("axis {axis} out of range") });
            }
            let mut out_shape = first.shape().to_vec();
            out_shape[axis] = 0;
            for v in parts {
                let s = nodes[v.id].value.shape();
                let mismatch = s.len() != first.rank()
                    || s.iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b);
                if mismatch {
                    return Err(TensorError::Shape { op: "concat", lhs: first.shape().to_vec(), rhs: s.to_vec() });
                }
                out_shape[axis] += s[axis];
            }
            let outer = numel(&out_shape[..axis]);
            let inner = numel(&out_shape[axis + 1..]);
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for v in parts {
                    let t = &nodes[v.id].value;
                    let run = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
                }
            }
            let rg = parts.iter().any(|v| nodes[v.id].requires_grad);
            (Tensor::from_vec(&out_shape, data)?, rg)
        };
        let op = Op::Concat { inputs: parts.iter().map(|v| v.id).collect(), axis };
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a scalar `loss`. Clears the tape afterwards.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if loss.generation != self.generation.get() {
            return Err(TensorError::Usage("backward on a stale variable".into()));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.param_nodes.borrow_mut().clear();
        let generation = self.generation.get();
        self.generation.set(generation + 1);

        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![F::one()]);

        let mut leaves = HashMap::new();
        let mut params: HashMap<ParamId, Vec<F>> = HashMap::new();
        leaves.insert(loss.id, vec![F::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param } = node.op {
                if let Some(pid) = param {
                    params.insert(pid, g.clone());
                }
                leaves.insert(id, g);
                continue;
            }
            crate::grad::propagate(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { generation, loss: loss.id, leaves, params })
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn elementwise<F: Float>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if !suffix_broadcast(a.shape(), b.shape()) {
        return Err(TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let bd = b.data();
    let data = a
        .data()
        .chunks_exact(bd.len())
        .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

fn map<F: Float>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl<'t, F: Float> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<F>> {
        assert_eq!(self.generation, self.tape.generation.get(), "stale Var: the tape was cleared by backward");
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        let v = self.value();
        Tensor::from_vec(v.shape(), v.data().to_vec()).expect("valid")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Elementwise sum; `rhs` may match a trailing suffix of `self`'s shape.
    pub fn add(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.record("add", [self, rhs], |[a, b]| {
            Ok((elementwise("add", a, b, |x, y| x + y)?, Op::Add { a: self.id, b: rhs.id }))
        })
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.record("sub", [self, rhs], |[a, b]| {
            Ok((elementwise("sub", a, b, |x, y| x - y)?, Op::Sub { a: self.id, b: rhs.id }))
        })
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.record("mul", [self, rhs], |[a, b]| {
            Ok((elementwise("mul", a, b, |x, y| x * y)?, Op::Mul { a: self.id, b: rhs.id }))
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t, F>> {
        let factor = F::from_f64_lossy(factor);
        self.tape.record("scale", [self], |[x]| Ok((map(x, |v| v * factor), Op::Scale { x: self.id, factor })))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Result<Var<'t, F>> {
        self.tape.record("one_minus", [self], |[x]| Ok((map(x, |v| F::one() - v), Op::OneMinus { x: self.id })))
    }

    /// `[.., k] × [k, n] → [.., n]`: leading axes of `self` are treated as rows.
    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.record("matmul", [self, rhs], |[a, b]| {
            if a.rank() < 2 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
                return Err(TensorError::Shape { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
            let k = b.shape()[0];
            let n = b.shape()[1];
            let m = a.numel() / k;
            let mut out = vec![F::zero(); m * n];
            crate::float::gemm(
                crate::MatRef::row_major(a.data(), m, k),
                crate::MatRef::row_major(b.data(), k, n),
                &mut out,
                false,
            );
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("rank >= 2") = n;
            Ok((Tensor::from_vec(&shape, out)?, Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
        })
    }

    /// Batched product over matching leading axes: `[.., m, k] × [.., k, n]`.
    pub fn bmm(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.batched(rhs, false)
    }

    /// Batched product with the right operand transposed: `[.., m, k] × [.., n, k]ᵀ`.
    pub fn bmm_nt(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.batched(rhs, true)
    }

    fn batched(self, rhs: Var<'t, F>, trans_b: bool) -> Result<Var<'t, F>> {
        self.tape.record("bmm", [self, rhs], |[a, b]| {
            let (ra, rb) = (a.rank(), b.rank());
            let bad = ra < 3 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2];
            let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
            let (kb, n) = if trans_b {
                (b.shape()[rb - 1], b.shape()[rb - 2])
            } else {
                (b.shape()[rb - 2], b.shape()[rb - 1])
            };
            if bad || k != kb {
                return Err(TensorError::Shape { op: "bmm", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
            let batch = numel(&a.shape()[..ra - 2]);
            let mut out = vec![F::zero(); batch * m * n];
            for i in 0..batch {
                let av = &a.data()[i * m * k..(i + 1) * m * k];
                let bv = &b.data()[i * k * n..(i + 1) * k * n];
                let bref = if trans_b {
                    crate::MatRef::transposed(bv, n, k)
                } else {
                    crate::MatRef::row_major(bv, k, n)
                };
                crate::float::gemm(crate::MatRef::row_major(av, m, k), bref, &mut out[i * m * n..(i + 1) * m * n], false);
            }
            let mut shape = a.shape().to_vec();
            shape[ra - 1] = n;
            Ok((
                Tensor::from_vec(&shape, out)?,
                Op::BatchMatMul { a: self.id, b: rhs.id, batch, m, k, n, trans_b },
            ))
        })
    }

    /// Repeats the tensor along a new leading axis of extent `batch`.
    pub fn expand_batch(self, batch: usize) -> Result<Var<'t, F>> {
        self.tape.record("expand_batch", [self], |[x]| {
            if batch == 0 {
                return Err(TensorError::Dimension { op: "expand_batch", msg: "batch must be positive".into() });
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(x.shape());
            let data = x.data().repeat(batch);
            Ok((Tensor::from_vec(&shape, data)?, Op::ExpandBatch { x: self.id }))
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        self.tape.record("reshape", [self], |[x]| {
            if numel(shape) != x.numel() || shape.contains(&0) {
                return Err(TensorError::Shape { op: "reshape", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
            }
            Ok((Tensor::from_vec(shape, x.data().to_vec())?, Op::Reshape { x: self.id }))
        })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        self.tape.record("permute", [self], |[x]| {
            let value = kernels::permute(x, axes)?;
            Ok((value, Op::Permute { x: self.id, axes: axes.to_vec() }))
        })
    }

    pub fn transpose(self, a0: usize, a1: usize) -> Result<Var<'t, F>> {
        let rank = self.value().rank();
        if a0 >= rank || a1 >= rank {
            return Err(TensorError::Dimension { op: "transpose", msg: format!("axes ({a0}, {a1}) for rank {rank}") });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a0, a1);
        self.permute(&axes)
    }

    /// Max-subtracted softmax along `axis`. Rows that are entirely `-inf` yield zeros.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        self.tape.record("softmax", [self], |[x]| {
            if axis >= x.rank() {
                return Err(TensorError::Dimension { op: "softmax", msg: format!("axis {axis} for rank {}", x.rank()) });
            }
            if x.data().iter().any(|v| v.is_nan()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let outer = numel(&x.shape()[..axis]);
            let len = x.shape()[axis];
            let inner = numel(&x.shape()[axis + 1..]);
            let mut out = x.data().to_vec();
            kernels::softmax_inplace(&mut out, outer, len, inner);
            Ok((Tensor::from_vec(x.shape(), out)?, Op::Softmax { x: self.id, outer, len, inner }))
        })
    }

    /// Normalizes the trailing axis, then applies `gamma · x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
        self.tape.record("layer_norm", [self, gamma, beta], |[x, g, b]| {
            let dim = *x.shape().last().expect("rank >= 1");
            if g.shape() != [dim] || b.shape() != [dim] {
                return Err(TensorError::Shape { op: "layer_norm", lhs: x.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let (out, mean, rstd) = kernels::layer_norm(x.data(), g.data(), b.data(), dim, F::from_f64_lossy(eps));
            Ok((
                Tensor::from_vec(x.shape(), out)?,
                Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, dim, mean, rstd },
            ))
        })
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        self.tape.record("relu", [self], |[x]| Ok((map(x, |v| v.max(F::zero())), Op::Relu { x: self.id })))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t, F>> {
        self.tape.record("gelu", [self], |[x]| Ok((map(x, kernels::gelu), Op::Gelu { x: self.id })))
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        self.tape.record("sigmoid", [self], |[x]| Ok((map(x, kernels::sigmoid), Op::Sigmoid { x: self.id })))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        self.tape.record("narrow", [self], |[x]| {
            if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
                return Err(TensorError::Dimension {
                    op: "narrow",
                    msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
                });
            }
            let outer = numel(&x.shape()[..axis]);
            let inner = numel(&x.shape()[axis + 1..]);
            let full = x.shape()[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * full + start * inner..o * full + (start + len) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Ok((Tensor::from_vec(&shape, data)?, Op::Narrow { x: self.id, axis, start }))
        })
    }

    /// Row lookup into a `[vocab, dim]` table; `self` is the table.
    pub fn embedding(self, indices: &[usize]) -> Result<Var<'t, F>> {
        self.tape.record("embedding", [self], |[table]| {
            if table.rank() != 2 || indices.is_empty() {
                return Err(TensorError::Dimension { op: "embedding", msg: format!("table {:?}", table.shape()) });
            }
            let (vocab, dim) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * dim);
            for &i in indices {
                if i >= vocab {
                    return Err(TensorError::Label { index: i, classes: vocab });
                }
                data.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
            }
            Ok((
                Tensor::from_vec(&[indices.len(), dim], data)?,
                Op::Embedding { table: self.id, indices: indices.to_vec() },
            ))
        })
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        self.tape.record("sum", [self], |[x]| {
            let s: F = x.data().iter().copied().sum();
            Ok((Tensor::scalar(s), Op::Sum { x: self.id }))
        })
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        self.tape.record("mean", [self], |[x]| {
            let s: F = x.data().iter().copied().sum();
            Ok((Tensor::scalar(s / F::from_usize(x.numel()).expect("count")), Op::Mean { x: self.id }))
        })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `self`
    /// (`[.., C]` logits). Positions whose target equals `ignore` do not count.
    pub fn cross_entropy(self, targets: &[usize], ignore: Option<usize>) -> Result<Var<'t, F>> {
        self.tape.record("cross_entropy", [self], |[logits]| {
            let classes = *logits.shape().last().expect("rank >= 1");
            let rows = logits.numel() / classes;
            if targets.len() != rows {
                return Err(TensorError::Shape { op: "cross_entropy", lhs: logits.shape().to_vec(), rhs: vec![targets.len()] });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
                return Err(TensorError::Label { index: bad, classes });
            }
            let mut probs = logits.data().to_vec();
            kernels::softmax_inplace(&mut probs, rows, classes, 1);
            let mut total = 0.0f64;
            let mut kept = Vec::with_capacity(rows);
            for (r, &t) in targets.iter().enumerate() {
                if Some(t) == ignore {
                    kept.push(None);
                    continue;
                }
                let row = &logits.data()[r * classes..(r + 1) * classes];
                total += kernels::log_sum_exp(row) - row[t].to_f64_lossy();
                kept.push(Some(t));
            }
            let counted = kept.iter().filter(|t| t.is_some()).count();
            let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
            Ok((
                Tensor::scalar(F::from_f64_lossy(loss)),
                Op::CrossEntropy { logits: self.id, targets: kept, probs, counted },
            ))
        })
    }

    /// 2-D cross-correlation of `self` (`[B, C, H, W]`) with `weight` (`[O, C, kh, kw]`).
    pub fn conv2d(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>, stride: usize, padding: usize) -> Result<Var<'t, F>> {
        let compute = |x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>| -> Result<(Tensor<F>, ConvGeom)> {
            let geom = kernels::conv_geom(x.shape(), w.shape(), stride, padding)?;
            if let Some(b) = b {
                if b.shape() != [geom.out_channels] {
                    return Err(TensorError::Shape { op: "conv2d", lhs: w.shape().to_vec(), rhs: b.shape().to_vec() });
                }
            }
            let out = kernels::conv2d_forward(x.data(), w.data(), b.map(|b| b.data()), &geom);
            let shape = [geom.batch, geom.out_channels, geom.out_h, geom.out_w];
            Ok((Tensor::from_vec(&shape, out)?, geom))
        };
        match bias {
            Some(b) => self.tape.record("conv2d", [self, weight, b], |[x, w, bt]| {
                let (v, geom) = compute(x, w, Some(bt))?;
                Ok((v, Op::Conv2d { x: self.id, w: weight.id, b: Some(b.id), geom }))
            }),
            None => self.tape.record("conv2d", [self, weight], |[x, w]| {
                let (v, geom) = compute(x, w, None)?;
                Ok((v, Op::Conv2d { x: self.id, w: weight.id, b: None, geom }))
            }),
        }
    }

    /// Nearest-neighbour ×2 upsampling of a `[B, C, H, W]` map.
    pub fn upsample2x(self) -> Result<Var<'t, F>> {
        self.tape.record("upsample2x", [self], |[x]| {
            if x.rank() != 4 {
                return Err(TensorError::Dimension { op: "upsample2x", msg: format!("expected rank 4, got {:?}", x.shape()) });
            }
            let s = x.shape();
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut out = vec![F::zero(); bc * 4 * h * w];
            for p in 0..bc {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[p * 4 * h * w + i * 2 * w + j] = x.data()[p * h * w + (i / 2) * w + j / 2];
                    }
                }
            }
            Ok((Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2x { x: self.id }))
        })
    }

    /// Replaces each trailing-axis row flagged in `mask` by `token`.
    pub fn replace_rows(self, token: Var<'t, F>, mask: &[bool]) -> Result<Var<'t, F>> {
        self.tape.record("replace_rows", [self, token], |[x, t]| {
            let dim = *x.shape().last().expect("rank >= 1");
            if t.shape() != [dim] || mask.len() != x.numel() / dim {
                return Err(TensorError::Shape { op: "replace_rows", lhs: x.shape().to_vec(), rhs: t.shape().to_vec() });
            }
            let mut data = x.data().to_vec();
            for (row, &m) in data.chunks_exact_mut(dim).zip(mask) {
                if m {
                    row.copy_from_slice(t.data());
                }
            }
            Ok((Tensor::from_vec(x.shape(), data)?, Op::ReplaceRows { x: self.id, token: token.id, mask: mask.to_vec() }))
        })
    }

    /// Same value, cut from the graph: no gradient flows back through it.
    pub fn detach(self) -> Var<'t, F> {
        let t = self.to_tensor();
        self.tape.constant(t)
    }
}
