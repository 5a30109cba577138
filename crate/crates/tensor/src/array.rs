//! Dense row-major `f64` arrays and the raw kernels the tape builds on.
//!
//! Nothing in this module knows about gradients. Every function takes
//! plain arrays and returns a fresh array.

use crate::{Result, TensorError};

/// Number of elements for a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "array",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed as broadcast to `target` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `target` in row-major order, passing the flat
/// offsets into two broadcast operands.
fn for_each_broadcast(target: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(target);
    if total == 0 {
        return;
    }
    let rank = target.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = target[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = total / inner;
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let mut oa = 0;
        let mut ob = 0;
        for k in 0..rank - 1 {
            oa += idx[k] * sa[k];
            ob += idx[k] * sb[k];
        }
        for i in 0..inner {
            f(oa + i * ia, ob + i * ib);
        }
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            if idx[k] < target[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn binary(op: &'static str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Array { shape: a.shape.clone(), data });
    }
    let shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut data = Vec::with_capacity(numel(&shape));
    for_each_broadcast(&shape, &sa, &sb, |ia, ib| data.push(f(a.data[ia], b.data[ib])));
    Ok(Array { shape, data })
}

/// Broadcasts `a` up to `shape`.
pub fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    match broadcast_shapes(&a.shape, shape) {
        Some(s) if s == shape => {}
        _ => return Err(TensorError::ShapeMismatch { op: "broadcast_to", lhs: a.shape.clone(), rhs: shape.to_vec() }),
    }
    if a.shape == shape {
        return Ok(a.clone());
    }
    let sa = broadcast_strides(&a.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = Vec::with_capacity(numel(shape));
    for_each_broadcast(shape, &sa, &zero, |ia, _| data.push(a.data[ia]));
    Ok(Array { shape: shape.to_vec(), data })
}

/// Sums `a` down to `shape`, the adjoint of [`broadcast_to`].
pub fn sum_to(a: &Array, shape: &[usize]) -> Result<Array> {
    match broadcast_shapes(shape, &a.shape) {
        Some(s) if s == a.shape => {}
        _ => return Err(TensorError::ShapeMismatch { op: "sum_to", lhs: a.shape.clone(), rhs: shape.to_vec() }),
    }
    if a.shape == shape {
        return Ok(a.clone());
    }
    let so = broadcast_strides(shape, &a.shape);
    let sa = broadcast_strides(&a.shape, &a.shape);
    let mut out = vec![0.0; numel(shape)];
    for_each_broadcast(&a.shape, &so, &sa, |io, ia| out[io] += a.data[ia]);
    Ok(Array { shape: shape.to_vec(), data: out })
}

/// Matrix product of the last two axes with optional transposes.
///
/// Supported layouts: both operands rank 2, or both rank 3 with equal
/// leading (batch) size.
pub fn matmul(a: &Array, b: &Array, ta: bool, tb: bool) -> Result<Array> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() };
    let (batch, a2, b2) = match (a.rank(), b.rank()) {
        (2, 2) => (1, &a.shape[..], &b.shape[..]),
        (3, 3) if a.shape[0] == b.shape[0] => (a.shape[0], &a.shape[1..], &b.shape[1..]),
        _ => return Err(mismatch()),
    };
    let (m, k) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if k != kb {
        return Err(mismatch());
    }
    let mut shape = if batch > 1 || a.rank() == 3 { vec![batch] } else { Vec::new() };
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    // Row/column strides of op(A) and op(B) inside one batch entry.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m > 0 && n > 0 {
        for bi in 0..batch {
            let pa = &a.data[bi * m * k..(bi + 1) * m * k];
            let pb = &b.data[bi * k * n..(bi + 1) * k * n];
            let pc = &mut out[bi * m * n..(bi + 1) * m * n];
            if k == 0 {
                continue;
            }
            // SAFETY: slices cover exactly m*k, k*n and m*n elements and the
            // strides above address only those ranges.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    pa.as_ptr(),
                    rsa,
                    csa,
                    pb.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    pc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    Ok(Array { shape, data: out })
}

/// Softmax over the last axis after adding an additive mask of `0`/`-inf`
/// entries. Rows whose every entry is masked produce zeros.
pub fn masked_softmax(logits: &Array, mask: &Array) -> Result<Array> {
    if logits.shape != mask.shape {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax",
            lhs: logits.shape.clone(),
            rhs: mask.shape.clone(),
        });
    }
    let width = logits.last_dim();
    let mut out = vec![0.0; logits.len()];
    if width == 0 {
        return Ok(Array { shape: logits.shape.clone(), data: out });
    }
    for ((x, m), y) in
        logits.data.chunks_exact(width).zip(mask.data.chunks_exact(width)).zip(out.chunks_exact_mut(width))
    {
        let mut max = f64::NEG_INFINITY;
        for (&xi, &mi) in x.iter().zip(m) {
            if mi != f64::NEG_INFINITY {
                max = max.max(xi + mi);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for ((&xi, &mi), yi) in x.iter().zip(m).zip(y.iter_mut()) {
            if mi != f64::NEG_INFINITY {
                *yi = (xi + mi - max).exp();
                total += *yi;
            }
        }
        for yi in y.iter_mut() {
            *yi /= total;
        }
    }
    Ok(Array { shape: logits.shape.clone(), data: out })
}

/// Rows `indices` of a rank-2 table.
pub fn gather_rows(table: &Array, indices: &[usize]) -> Result<Array> {
    if table.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "gather_rows",
            msg: format!("table must be rank 2, got {:?}", table.shape),
        });
    }
    let (rows, width) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        if i >= rows {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {i} out of range for {rows} rows"),
            });
        }
        data.extend_from_slice(&table.data[i * width..(i + 1) * width]);
    }
    Ok(Array { shape: vec![indices.len(), width], data })
}

/// Adjoint of [`gather_rows`]: adds row `k` of `src` into row `indices[k]`.
pub fn scatter_rows(src: &Array, indices: &[usize], rows: usize) -> Result<Array> {
    if src.rank() != 2 || src.shape[0] != indices.len() {
        return Err(TensorError::InvalidArgument {
            op: "scatter_rows",
            msg: format!("source {:?} does not match {} indices", src.shape, indices.len()),
        });
    }
    let width = src.shape[1];
    let mut out = vec![0.0; rows * width];
    for (k, &i) in indices.iter().enumerate() {
        if i >= rows {
            return Err(TensorError::InvalidArgument {
                op: "scatter_rows",
                msg: format!("row index {i} out of range for {rows} rows"),
            });
        }
        for (o, s) in out[i * width..(i + 1) * width].iter_mut().zip(&src.data[k * width..(k + 1) * width]) {
            *o += s;
        }
    }
    Ok(Array { shape: vec![rows, width], data: out })
}

/// Concatenation along the last axis.
pub fn concat_last(parts: &[&Array]) -> Result<Array> {
    let first = parts.first().ok_or(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
    let lead = &first.shape[..first.rank().saturating_sub(1)];
    for p in parts {
        if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: p.shape.clone() });
        }
    }
    let rows = numel(lead);
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let w = p.last_dim();
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Array { shape, data })
}

/// Columns `start..start + len` of the last axis.
pub fn narrow_last(a: &Array, start: usize, len: usize) -> Result<Array> {
    let w = a.last_dim();
    if a.rank() == 0 || start + len > w {
        return Err(TensorError::InvalidArgument {
            op: "narrow",
            msg: format!("range {start}..{} outside last axis of {:?}", start + len, a.shape),
        });
    }
    let rows = a.len() / w.max(1);
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.data[r * w + start..r * w + start + len]);
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = len;
    Ok(Array { shape, data })
}

/// Places `a` at columns `start..` of a zero array whose last axis is `total`.
pub fn pad_last(a: &Array, start: usize, total: usize) -> Result<Array> {
    let w = a.last_dim();
    if a.rank() == 0 || start + w > total {
        return Err(TensorError::InvalidArgument {
            op: "pad",
            msg: format!("cannot place width {w} at column {start} of {total}"),
        });
    }
    let rows = numel(&a.shape[..a.rank() - 1]);
    let mut data = vec![0.0; rows * total];
    for r in 0..rows {
        data[r * total + start..r * total + start + w].copy_from_slice(&a.data[r * w..(r + 1) * w]);
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = total;
    Ok(Array { shape, data })
}

/// Precomputed rotary-embedding angles for a set of rows.
///
/// Row `r` holds position `positions[r]`; pair `k` of a head vector is
/// rotated by `position * base^(-2k / head_dim)`.
#[derive(Debug)]
pub struct RopeTable {
    head_dim: usize,
    rows: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[usize], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "rope",
                msg: format!("head dimension {head_dim} must be even"),
            });
        }
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|k| base.powf(-2.0 * k as f64 / head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for f in &freqs {
                let angle = p as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self { head_dim, rows: positions.len(), cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Rotates every row of `x` (shape `[rows, head_dim]`). `inverse` applies
    /// the transposed rotation, which is also the adjoint.
    pub fn apply(&self, x: &Array, inverse: bool) -> Result<Array> {
        if x.shape != [self.rows, self.head_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: x.shape.clone(),
                rhs: vec![self.rows, self.head_dim],
            });
        }
        let half = self.head_dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = vec![0.0; x.len()];
        for r in 0..self.rows {
            for k in 0..half {
                let (c, s) = (self.cos[r * half + k], sign * self.sin[r * half + k]);
                let i = r * self.head_dim + 2 * k;
                let (x0, x1) = (x.data[i], x.data[i + 1]);
                out[i] = x0 * c - x1 * s;
                out[i + 1] = x0 * s + x1 * c;
            }
        }
        Ok(Array { shape: x.shape.clone(), data: out })
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `order`-th derivative of the exact (erf) GELU, for `order <= 3`.
pub fn gelu_derivative(x: f64, order: u8) -> f64 {
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    match order {
        0 => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        1 => 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * pdf,
        2 => pdf * (2.0 - x * x),
        3 => pdf * (x * x * x - 4.0 * x),
        _ => f64::NAN,
    }
}
