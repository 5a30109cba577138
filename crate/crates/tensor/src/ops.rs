//! Backward rules, one per [`Op`].

use crate::tape::Op;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Vector-Jacobian products for one node. `needs[i]` marks inputs whose
/// gradient is wanted; the others may be returned as `None`.
pub(crate) fn backward(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let shape_of = |i: usize| inputs[i].shape().to_vec();
    let grads = match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            want(0).then(|| g.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.sum_to(&shape_of(1))).transpose()?,
        ],
        Op::Sub => vec![
            want(0).then(|| g.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.neg()?.sum_to(&shape_of(1))).transpose()?,
        ],
        Op::Mul => vec![
            want(0).then(|| g.mul(&inputs[1])?.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.mul(&inputs[0])?.sum_to(&shape_of(1))).transpose()?,
        ],
        Op::Div => vec![
            want(0).then(|| g.div(&inputs[1])?.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.mul(output)?.div(&inputs[1])?.neg()?.sum_to(&shape_of(1))).transpose()?,
        ],
        Op::Neg => vec![Some(g.neg()?)],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::Square => vec![Some(g.mul(&inputs[0])?.scale(2.0)?)],
        Op::Sqrt => vec![Some(g.div(output)?.scale(0.5)?)],
        Op::Abs => {
            let sign = inputs[0].value().map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![Some(g.mul(&Tensor::constant(sign))?)]
        }
        Op::Gelu(order) => {
            if *order >= 3 {
                return Err(TensorError::UnsupportedOrder(order + 1));
            }
            vec![Some(g.mul(&inputs[0].gelu_derivative(order + 1)?)?)]
        }
        Op::SumTo => vec![Some(g.broadcast_to(&shape_of(0))?)],
        Op::BroadcastTo => vec![Some(g.sum_to(&shape_of(0))?)],
        Op::Reshape => vec![Some(g.reshape(&shape_of(0))?)],
        Op::MatMul { ta, tb } => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (ta, tb) = (*ta, *tb);
            let ga =
                want(0).then(|| if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) }).transpose()?;
            let gb =
                want(1).then(|| if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(g, !ta, false) }).transpose()?;
            vec![ga, gb]
        }
        Op::MaskedSoftmax => {
            // dx = y * (g - sum(g * y))
            let rank = output.shape().len();
            let dot = g.mul(output)?.sum_axis(rank - 1, true)?;
            vec![Some(output.mul(&g.sub(&dot)?)?)]
        }
        Op::GatherRows(idx) => vec![Some(g.scatter_rows(idx, inputs[0].shape()[0])?)],
        Op::ScatterRows(idx) => vec![Some(g.gather_rows(idx)?)],
        Op::Concat(widths) => {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (i, &w) in widths.iter().enumerate() {
                out.push(want(i).then(|| g.narrow_last(start, w)).transpose()?);
                start += w;
            }
            out
        }
        Op::Narrow { start } => {
            let total = inputs[0].value().last_dim();
            vec![Some(g.pad_last(*start, total)?)]
        }
        Op::Pad { start } => vec![Some(g.narrow_last(*start, inputs[0].value().last_dim())?)],
        Op::Rope { table, inverse } => vec![Some(g.rope_inner(table, !inverse)?)],
        Op::StraightThrough => vec![Some(g.clone())],
    };
    debug_assert!(grads.len() == inputs.len() || matches!(op, Op::Leaf));
    Ok(grads)
}
