//! The differentiable tensor handle and its forward operations.

use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use crate::array::{self, Array, RopeTable};
use crate::tape::{Input, Op, Tape};
use crate::{Result, TensorError};

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// An n-dimensional `f64` value, optionally attached to a [`Tape`].
///
/// Tensors without a tape are constants: operations on them are computed
/// eagerly and never recorded.
#[derive(Clone)]
pub struct Tensor {
    value: Arc<Array>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Tensor {
    pub fn constant(value: Array) -> Self {
        Self { value: Arc::new(value), node: None }
    }

    pub fn constant_shared(value: Arc<Array>) -> Self {
        Self { value, node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub(crate) fn from_node(value: Arc<Array>, tape: Tape, id: usize) -> Self {
        Self { value, node: Some(NodeRef { tape, id }) }
    }

    pub(crate) fn node(&self) -> Option<(Tape, usize)> {
        self.node.as_ref().map(|n| (n.tape.clone(), n.id))
    }

    /// True when this tensor is recorded on a tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Array> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// Same value, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Self::constant_shared(self.value.clone())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.value.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    /// Wraps a computed value, recording it when any input is tracked and
    /// its tape is recording.
    fn record(op: Op, inputs: &[&Tensor], value: Array) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    Some(existing) if !existing.same(&n.tape) => return Err(TensorError::TapeMismatch),
                    _ => tape = Some(&n.tape),
                }
            }
        }
        let value = Arc::new(value);
        match tape {
            Some(tape) if tape.is_recording() => {
                let ins = inputs
                    .iter()
                    .map(|t| match &t.node {
                        Some(n) => Input::Node(n.id),
                        None => Input::Const(t.value.clone()),
                    })
                    .collect();
                let id = tape.push(op, ins, value.clone());
                Ok(Tensor::from_node(value, tape.clone(), id))
            }
            _ => Ok(Tensor::constant_shared(value)),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::binary("add", &self.value, &other.value, |a, b| a + b)?;
        Self::record(Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::binary("sub", &self.value, &other.value, |a, b| a - b)?;
        Self::record(Op::Sub, &[self, other], v)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::binary("mul", &self.value, &other.value, |a, b| a * b)?;
        Self::record(Op::Mul, &[self, other], v)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::binary("div", &self.value, &other.value, |a, b| a / b)?;
        Self::record(Op::Div, &[self, other], v)
    }

    pub fn neg(&self) -> Result<Tensor> {
        Self::record(Op::Neg, &[self], self.value.map(|v| -v))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Self::record(Op::Scale(factor), &[self], self.value.map(|v| v * factor))
    }

    pub fn square(&self) -> Result<Tensor> {
        Self::record(Op::Square, &[self], self.value.map(|v| v * v))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        Self::record(Op::Sqrt, &[self], self.value.map(f64::sqrt))
    }

    pub fn abs(&self) -> Result<Tensor> {
        Self::record(Op::Abs, &[self], self.value.map(f64::abs))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        self.gelu_derivative(0)
    }

    pub(crate) fn gelu_derivative(&self, order: u8) -> Result<Tensor> {
        if order > 3 {
            return Err(TensorError::UnsupportedOrder(order));
        }
        Self::record(Op::Gelu(order), &[self], self.value.map(|v| array::gelu_derivative(v, order)))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::record(Op::SumTo, &[self], array::sum_to(&self.value, shape)?)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::record(Op::BroadcastTo, &[self], array::broadcast_to(&self.value, shape)?)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.value.rank() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {:?}", self.shape()),
            });
        }
        let mut kept = self.shape().to_vec();
        kept[axis] = 1;
        let summed = self.sum_to(&kept)?;
        if keepdim {
            Ok(summed)
        } else {
            kept.remove(axis);
            summed.reshape(&kept)
        }
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let ones = vec![1; self.value.rank()];
        self.sum_to(&ones)?.reshape(&[])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel().max(1);
        self.sum_all()?.scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::record(Op::Reshape, &[self], self.value.reshape(shape)?)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes the last two axes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let v = array::matmul(&self.value, &other.value, ta, tb)?;
        Self::record(Op::MatMul { ta, tb }, &[self, other], v)
    }

    /// Softmax over the last axis after adding `mask` (entries `0` or `-inf`).
    /// Fully masked rows give zeros.
    pub fn masked_softmax(&self, mask: &Array) -> Result<Tensor> {
        let mask = if mask.shape() == self.shape() { mask.clone() } else { array::broadcast_to(mask, self.shape())? };
        let v = array::masked_softmax(&self.value, &mask)?;
        Self::record(Op::MaskedSoftmax, &[self], v)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.masked_softmax(&Array::zeros(self.shape()))
    }

    /// Rows of a rank-2 table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let v = array::gather_rows(&self.value, indices)?;
        Self::record(Op::GatherRows(Rc::from(indices)), &[self], v)
    }

    /// Adds row `k` into row `indices[k]` of a zero table with `rows` rows.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        let v = array::scatter_rows(&self.value, indices, rows)?;
        Self::record(Op::ScatterRows(Rc::from(indices)), &[self], v)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let arrays: Vec<&Array> = parts.iter().map(|t| t.value.as_ref()).collect();
        let v = array::concat_last(&arrays)?;
        let widths: Rc<[usize]> = parts.iter().map(|t| t.value.last_dim()).collect();
        Self::record(Op::Concat(widths), parts, v)
    }

    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let v = array::narrow_last(&self.value, start, len)?;
        Self::record(Op::Narrow { start }, &[self], v)
    }

    pub fn pad_last(&self, start: usize, total: usize) -> Result<Tensor> {
        let v = array::pad_last(&self.value, start, total)?;
        Self::record(Op::Pad { start }, &[self], v)
    }

    /// Rotary position embedding of each row (`[rows, head_dim]`).
    pub fn rope(&self, table: &Rc<RopeTable>) -> Result<Tensor> {
        self.rope_inner(table, false)
    }

    pub(crate) fn rope_inner(&self, table: &Rc<RopeTable>, inverse: bool) -> Result<Tensor> {
        let v = table.apply(&self.value, inverse)?;
        Self::record(Op::Rope { table: table.clone(), inverse }, &[self], v)
    }

    /// Replaces the value by `f(value)` while passing gradients through unchanged.
    pub fn straight_through(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Self::record(Op::StraightThrough, &[self], self.value.map(f))
    }

    /// Replaces the value by `value` (same shape) while passing gradients
    /// through unchanged.
    pub fn straight_through_value(&self, value: Array) -> Result<Tensor> {
        if value.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through_value",
                lhs: self.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        Self::record(Op::StraightThrough, &[self], value)
    }

    /// Affine map `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.matmul(weight)?.add(bias)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !train || p <= 0.0 {
            return Ok(self.clone());
        }
        if p >= 1.0 {
            return self.mul(&Tensor::constant(Array::zeros(self.shape())));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.mul(&Tensor::constant(Array::new(self.shape().to_vec(), mask)?))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    ///
    /// Zero-variance rows map to zeros before the affine step.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, epsilon: f64) -> Result<Tensor> {
        let axis = self
            .value
            .rank()
            .checked_sub(1)
            .ok_or(TensorError::InvalidArgument { op: "layer_norm", msg: "scalar input".into() })?;
        if gain.shape() != [self.value.last_dim()] || bias.shape() != gain.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let centered = self.sub(&self.mean_axis(axis, true)?)?;
        let var = centered.square()?.mean_axis(axis, true)?;
        let std = var.add(&Tensor::scalar(epsilon))?.sqrt()?;
        centered.div(&std)?.mul(gain)?.add(bias)
    }
}
