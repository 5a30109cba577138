//! Compute graph recording and reverse-mode differentiation.
//!
//! Every backward rule is written in terms of ordinary [`Tensor`]
//! operations. With `create_graph` set those operations are recorded on
//! the same tape, so the returned gradients can be differentiated again
//! (reverse-over-reverse). Without it, recording is suspended and the
//! gradients come back as constants.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::array::{Array, RopeTable};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Operation kinds stored on the tape.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Square,
    Sqrt,
    Abs,
    /// The `k`-th derivative of GELU applied elementwise.
    Gelu(u8),
    SumTo,
    BroadcastTo,
    Reshape,
    MatMul {
        ta: bool,
        tb: bool,
    },
    MaskedSoftmax,
    GatherRows(Rc<[usize]>),
    ScatterRows(Rc<[usize]>),
    Concat(Rc<[usize]>),
    Narrow {
        start: usize,
    },
    Pad {
        start: usize,
    },
    Rope {
        table: Rc<RopeTable>,
        inverse: bool,
    },
    StraightThrough,
}

#[derive(Clone, Debug)]
pub(crate) enum Input {
    Node(usize),
    Const(Arc<Array>),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Input>,
    pub(crate) value: Arc<Array>,
}

struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// A compute graph. Cloning yields another handle to the same graph.
///
/// A tape is confined to one thread; separate tapes are independent.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), recording: true })))
    }

    /// Registers a differentiable leaf. Non-finite values are rejected.
    pub fn var(&self, value: Array) -> Result<Tensor> {
        self.var_shared(Arc::new(value))
    }

    /// Like [`Tape::var`] but shares an existing buffer.
    pub fn var_shared(&self, value: Arc<Array>) -> Result<Tensor> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite("leaf".into()));
        }
        let id = self.push(Op::Leaf, Vec::new(), value.clone());
        Ok(Tensor::from_node(value, self.clone(), id))
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Input>, value: Arc<Array>) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { op, inputs, value });
        inner.nodes.len() - 1
    }

    fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.0.borrow_mut().recording, on)
    }

    fn node_parts(&self, id: usize) -> (Op, Vec<Input>, Arc<Array>) {
        let inner = self.0.borrow();
        let n = &inner.nodes[id];
        (n.op.clone(), n.inputs.clone(), n.value.clone())
    }

    fn input_ids(&self, id: usize) -> Vec<usize> {
        self.0.borrow().nodes[id]
            .inputs
            .iter()
            .filter_map(|i| match i {
                Input::Node(j) => Some(*j),
                Input::Const(_) => None,
            })
            .collect()
    }

    fn tensor_for(&self, input: &Input) -> Tensor {
        match input {
            Input::Node(id) => {
                let value = self.0.borrow().nodes[*id].value.clone();
                Tensor::from_node(value, self.clone(), *id)
            }
            Input::Const(a) => Tensor::constant_shared(a.clone()),
        }
    }
}

struct RecordingGuard<'a> {
    tape: &'a Tape,
    previous: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.tape.set_recording(self.previous);
    }
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors that do not influence `output` get a zero gradient. With
/// `create_graph` the results are recorded and can be differentiated
/// again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalar(output.shape().to_vec()));
    }
    let zeros = |t: &Tensor| Tensor::constant(Array::zeros(t.shape()));
    let Some((tape, out_id)) = output.node() else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };

    let mut targets = Vec::with_capacity(wrt.len());
    for t in wrt {
        match t.node() {
            Some((tt, id)) if tt.same(&tape) && id <= out_id => targets.push(Some(id)),
            Some((tt, _)) if !tt.same(&tape) => return Err(TensorError::TapeMismatch),
            _ => targets.push(None),
        }
    }
    let Some(start) = targets.iter().flatten().copied().min() else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };

    // A node needs a gradient when it lies on a path from a target to the output.
    let span = out_id + 1 - start;
    let mut needed = vec![false; span];
    for id in targets.iter().flatten() {
        needed[id - start] = true;
    }
    for id in start..=out_id {
        if !needed[id - start] && tape.input_ids(id).iter().any(|&j| j >= start && needed[j - start]) {
            needed[id - start] = true;
        }
    }
    if !needed[out_id - start] {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    }

    let _guard = RecordingGuard { previous: tape.set_recording(create_graph), tape: &tape };

    let mut grads: Vec<Option<Tensor>> = vec![None; span];
    grads[out_id - start] = Some(Tensor::constant(Array::full(output.shape(), 1.0)));

    for id in (start..=out_id).rev() {
        if !needed[id - start] {
            continue;
        }
        let Some(g) = grads[id - start].clone() else { continue };
        let (op, inputs, value) = tape.node_parts(id);
        if matches!(op, Op::Leaf) {
            continue;
        }
        let needs: Vec<bool> =
            inputs.iter().map(|i| matches!(i, Input::Node(j) if *j >= start && needed[*j - start])).collect();
        let in_tensors: Vec<Tensor> = inputs.iter().map(|i| tape.tensor_for(i)).collect();
        let out_tensor = Tensor::from_node(value, tape.clone(), id);
        let input_grads = crate::ops::backward(&op, &in_tensors, &out_tensor, &g, &needs)?;
        for ((input, need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
            let (Input::Node(j), true, Some(ig)) = (input, *need, ig) else { continue };
            let slot = &mut grads[j - start];
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&ig)?,
                None => ig,
            });
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for (t, target) in wrt.iter().zip(targets) {
        let g = match target.and_then(|id| grads[id - start].clone()) {
            Some(g) => g,
            None => zeros(t),
        };
        if !g.value().all_finite() {
            return Err(TensorError::NonFinite("gradient".into()));
        }
        out.push(g);
    }
    Ok(out)
}
