//! Dense row-major `f64` tensors and the numeric kernels behind the tape.

use crate::error::{EcupError, Result};
use serde::{Deserialize, Serialize};

/// A dense tensor of 64-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(EcupError::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.values.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Splits the shape into (leading batch dims product, rows, cols) for rank >= 2.
    pub(crate) fn as_matrices(&self) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(EcupError::ShapeMismatch(format!(
                "expected rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        let cols = self.shape[self.rank() - 1];
        let rows = self.shape[self.rank() - 2];
        let batch: usize = self.shape[..self.rank() - 2].iter().product();
        Ok((batch, rows, cols))
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn dgemm_slice(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a . b^T` for row-major slices, via dgemm with swapped strides on `b`.
fn dgemm_nt_slice(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a^T . b` for row-major slices (`a` is k x m, result m x n).
fn dgemm_tn_slice(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How a binary matrix product pairs (possibly batched) operands.
///
/// Either operand may carry leading batch dimensions; an unbatched operand is
/// broadcast across the other's batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MatmulBatch {
    /// Both rank 2.
    Flat,
    /// Left batched, right shared.
    LeftBatched(usize),
    /// Right batched, left shared.
    RightBatched(usize),
    /// Both batched with equal batch size.
    BothBatched(usize),
}

pub(crate) fn matmul_batching(a: &Tensor, b: &Tensor) -> Result<MatmulBatch> {
    let (ab, _, _) = a.as_matrices()?;
    let (bb, _, _) = b.as_matrices()?;
    let a_batched = a.rank() > 2;
    let b_batched = b.rank() > 2;
    match (a_batched, b_batched) {
        (false, false) => Ok(MatmulBatch::Flat),
        (true, false) => Ok(MatmulBatch::LeftBatched(ab)),
        (false, true) => Ok(MatmulBatch::RightBatched(bb)),
        (true, true) => {
            if ab != bb {
                return Err(EcupError::ShapeMismatch(format!(
                    "batch sizes differ: {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            Ok(MatmulBatch::BothBatched(ab))
        }
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let batching = matmul_batching(a, b)?;
    let (_, m, ka) = a.as_matrices()?;
    let (_, br, bc) = b.as_matrices()?;
    let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(EcupError::ShapeMismatch(format!(
            "matmul inner dims differ: {:?} x {:?}{}",
            a.shape,
            b.shape,
            if transpose_b { " (rhs transposed)" } else { "" }
        )));
    }
    let k = ka;
    let (batch, out_shape) = match batching {
        MatmulBatch::Flat => (1, vec![m, n]),
        MatmulBatch::LeftBatched(nb) | MatmulBatch::BothBatched(nb) => {
            let mut s = a.shape[..a.rank() - 2].to_vec();
            s.extend([m, n]);
            (nb, s)
        }
        MatmulBatch::RightBatched(nb) => {
            let mut s = b.shape[..b.rank() - 2].to_vec();
            s.extend([m, n]);
            (nb, s)
        }
    };
    let mut out = Tensor::zeros(out_shape);
    let a_stride = if matches!(batching, MatmulBatch::Flat | MatmulBatch::RightBatched(_)) {
        0
    } else {
        m * k
    };
    let b_len = br * bc;
    let b_stride = if matches!(batching, MatmulBatch::Flat | MatmulBatch::LeftBatched(_)) {
        0
    } else {
        b_len
    };
    let kernel = if transpose_b { dgemm_nt_slice } else { dgemm_slice };

    let av = a.values();
    let bv = b.values();
    let chunks: Vec<(usize, &mut [f64])> = out.values_mut().chunks_mut(m * n).enumerate().collect();
    if batch >= 4 && m * k * n >= 16_384 {
        use rayon::prelude::*;
        chunks.into_par_iter().for_each(|(i, c)| {
            kernel(
                m,
                k,
                n,
                &av[i * a_stride..i * a_stride + m * k],
                &bv[i * b_stride..i * b_stride + b_len],
                c,
            );
        });
    } else {
        for (i, c) in chunks {
            kernel(
                m,
                k,
                n,
                &av[i * a_stride..i * a_stride + m * k],
                &bv[i * b_stride..i * b_stride + b_len],
                c,
            );
        }
    }
    Ok(out)
}

/// Batched matrix product; unbatched operands broadcast across the batch.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, false)
}

/// Batched `a . b^T` (the last two axes of `b` are transposed).
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, true)
}

/// Per-batch `a^T . b` accumulated over the batch; used by matmul backward
/// for an unbatched right operand. `a`: (batch, m, k) flattened matrices,
/// `b`: (batch, m, n); result (k, n).
pub(crate) fn matmul_tn_acc(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let mut tmp = vec![0.0; k * n];
    for i in 0..batch {
        dgemm_tn_slice(k, m, n, &a[i * m * k..(i + 1) * m * k], &b[i * m * n..(i + 1) * m * n], &mut tmp);
        for (o, t) in out.iter_mut().zip(tmp.iter()) {
            *o += t;
        }
    }
    out
}

/// Per-batch transpose-product against a shared (unbatched) operand;
/// result (batch, k, n) with the contraction over `m`.
///
/// With `shared_is_lhs`, computes `shared^T . g[i]` where `shared` is (m, k)
/// and each `g[i]` is (m, n); otherwise `g[i]^T . shared` where each `g[i]`
/// is (m, k) and `shared` is (m, n).
pub(crate) fn matmul_tn_shared_rhs(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    g: &[f64],
    shared: &[f64],
    shared_is_lhs: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * k * n];
    let g_stride = if shared_is_lhs { m * n } else { m * k };
    for i in 0..batch {
        let gi = &g[i * g_stride..(i + 1) * g_stride];
        let c = &mut out[i * k * n..(i + 1) * k * n];
        if shared_is_lhs {
            dgemm_tn_slice(k, m, n, shared, gi, c);
        } else {
            dgemm_tn_slice(k, m, n, gi, shared, c);
        }
    }
    out
}

/// Per-batch `a^T . b` without accumulation (both batched); result (batch, k, n).
pub(crate) fn matmul_tn_batched(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; batch * k * n];
    for i in 0..batch {
        dgemm_tn_slice(
            k,
            m,
            n,
            &a[i * m * k..(i + 1) * m * k],
            &b[i * m * n..(i + 1) * m * n],
            &mut out[i * k * n..(i + 1) * k * n],
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (trailing alignment, 1 stretches).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(EcupError::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 for broadcast (size-1) axes against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Applies `f` element-wise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let values = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            values,
        });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut values = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..numel {
        values.push(f(a.values[oa], b.values[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        values,
    })
}

/// Reduces `grad` (shaped like the broadcast output) back onto `shape` by
/// summing over the broadcast axes.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let strides = broadcast_strides(shape, &out_shape);
    let numel_out: usize = shape.iter().product();
    let mut values = vec![0.0; numel_out];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for &g in grad.values() {
        values[o] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            o -= strides[ax] * out_shape[ax];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        values,
    }
}
