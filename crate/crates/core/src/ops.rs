//! Eager (tape-free) helpers for index selection and row-wise operations.

use std::cmp::Ordering;

use crate::error::{shape_err, Error, Result};
use crate::tape::softmax_rows;
use crate::tensor::{IndexMatrix, Scalar, Tensor};

/// Indices of the `k` largest entries of every row of a `[M, N]` matrix,
/// ordered by descending score and then ascending column.
pub fn topk_rows<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<IndexMatrix> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(shape_err("topk_rows", format!("expected [M,N], got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("topk_rows: k = {k} outside 1..={n}")));
    }
    let mut out = Vec::with_capacity(m * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in scores.data().chunks(n) {
        order.clear();
        order.extend(0..n);
        // stable sort keeps ascending index among equal scores
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
        out.extend_from_slice(&order[..k]);
    }
    IndexMatrix::new(m, k, out)
}

/// `out[i, j, ...] = source[indices[i, j], ...]`.
pub fn gather_rows<T: Scalar>(source: &Tensor<T>, indices: &IndexMatrix) -> Result<Tensor<T>> {
    let s = source.shape();
    let m = s[0];
    if indices.rows != m {
        return Err(Error::Dim {
            op: "gather_rows",
            axis: "rows",
            expected: m,
            got: indices.rows,
        });
    }
    let inner: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(m * indices.cols * inner);
    for i in 0..m {
        for &v in indices.row(i) {
            if v >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    row: i,
                    value: v,
                    bound: m,
                });
            }
            data.extend_from_slice(&source.data()[v * inner..(v + 1) * inner]);
        }
    }
    let mut shape = vec![m, indices.cols];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(&shape, data)
}

/// Softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
    Tensor::new(x.shape(), softmax_rows(x.data(), n))
}
