//! Sum-of-Kronecker kernels over stacked factor sets.
//!
//! `a_stack` is `(n·n) x n` holding `A_1..A_n`; `b_stack` is `(n·p) x q`
//! holding `B_1..B_n`. The represented weight is `W = Σ_i A_i ⊗ B_i` with
//! shape `(n·p) x (n·q)`.

use super::{matmul, LinalgError, Result, Scalar, Tensor2};

/// Stacks equally shaped matrices vertically.
pub fn stack_rows<T: Scalar>(parts: &[Tensor2<T>]) -> Result<Tensor2<T>> {
    let Some(first) = parts.first() else {
        return Err(LinalgError::ZeroRank { op: "stack_rows" });
    };
    let (r, c) = first.shape();
    let mut data = Vec::with_capacity(parts.len() * r * c);
    for p in parts {
        if p.shape() != (r, c) {
            return Err(LinalgError::ShapeMismatch {
                op: "stack_rows",
                left: (r, c),
                right: p.shape(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor2::from_vec(parts.len() * r, c, data)
}

/// Splits a vertical stack into `n` equal parts.
pub fn unstack_rows<T: Scalar>(t: &Tensor2<T>, n: usize) -> Result<Vec<Tensor2<T>>> {
    if n == 0 || t.rows() % n != 0 {
        return Err(LinalgError::ShapeMismatch {
            op: "unstack_rows",
            left: t.shape(),
            right: (n, 0),
        });
    }
    let r = t.rows() / n;
    Ok((0..n).map(|i| t.block(i * r, 0, r, t.cols())).collect())
}

pub(crate) fn check_factor_shapes<T: Scalar>(
    op: &'static str,
    a_stack: &Tensor2<T>,
    b_stack: &Tensor2<T>,
    n: usize,
) -> Result<(usize, usize)> {
    if n == 0 || a_stack.shape() != (n * n, n) {
        return Err(LinalgError::ShapeMismatch {
            op,
            left: a_stack.shape(),
            right: (n * n, n),
        });
    }
    if b_stack.rows() % n != 0 {
        return Err(LinalgError::ShapeMismatch {
            op,
            left: b_stack.shape(),
            right: (n, 0),
        });
    }
    Ok((b_stack.rows() / n, b_stack.cols()))
}

/// Materializes `W = Σ_i A_i ⊗ B_i` block by block.
pub fn sum_kron<T: Scalar>(a_stack: &Tensor2<T>, b_stack: &Tensor2<T>, n: usize) -> Result<Tensor2<T>> {
    let (p, q) = check_factor_shapes("sum_kron", a_stack, b_stack, n)?;
    let cols = n * q;
    let mut w = Tensor2::zeros(n * p, cols);
    for i in 0..n {
        for a in 0..n {
            for b in 0..n {
                let coef = a_stack.get(i * n + a, b);
                if coef == T::zero() {
                    continue;
                }
                for r in 0..p {
                    let src = b_stack.row(i * p + r);
                    let dst = &mut w.row_mut(a * p + r)[b * q..(b + 1) * q];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + coef * s;
                    }
                }
            }
        }
    }
    Ok(w)
}

/// `x · Σ_i A_i ⊗ B_i` without forming the `k x d` weight.
///
/// Each row of `x` is split into `n` blocks of length `p = k/n`; viewing `x`
/// as `(rows·n) x p`, one matmul per `i` gives every block's product with
/// `B_i`, and the `A_i` coefficients mix those products into output blocks.
pub fn phm_matmul<T: Scalar>(x: &Tensor2<T>, a_stack: &Tensor2<T>, b_stack: &Tensor2<T>, n: usize) -> Result<Tensor2<T>> {
    let (p, q) = check_factor_shapes("phm_matmul", a_stack, b_stack, n)?;
    if x.cols() != n * p {
        return Err(LinalgError::ShapeMismatch {
            op: "phm_matmul",
            left: x.shape(),
            right: (n * p, n * q),
        });
    }
    let rows = x.rows();
    let d = n * q;
    let xr = x.reshape(rows * n, p)?;
    let mut y = Tensor2::zeros(rows, d);
    for i in 0..n {
        let b_i = b_stack.block(i * p, 0, p, q);
        let z = matmul(&xr, &b_i)?;
        for r in 0..rows {
            let y_row = y.row_mut(r);
            for a in 0..n {
                let z_row = z.row(r * n + a);
                for b in 0..n {
                    let coef = a_stack.get(i * n + a, b);
                    if coef == T::zero() {
                        continue;
                    }
                    for (o, &zv) in y_row[b * q..(b + 1) * q].iter_mut().zip(z_row) {
                        *o = *o + coef * zv;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Per-block products: block `i` of the result is `X_i · Y_i`, with
/// `x_stack: (n·p) x r` and `y_stack: (n·r) x q`.
pub fn block_matmul<T: Scalar>(x_stack: &Tensor2<T>, y_stack: &Tensor2<T>, n: usize) -> Result<Tensor2<T>> {
    if n == 0 || x_stack.rows() % n != 0 || y_stack.rows() % n != 0 || x_stack.cols() != y_stack.rows() / n {
        return Err(LinalgError::ShapeMismatch {
            op: "block_matmul",
            left: x_stack.shape(),
            right: y_stack.shape(),
        });
    }
    if x_stack.cols() == 0 {
        return Err(LinalgError::ZeroRank { op: "block_matmul" });
    }
    let p = x_stack.rows() / n;
    let r = x_stack.cols();
    let q = y_stack.cols();
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x_stack.block(i * p, 0, p, r);
        let yi = y_stack.block(i * r, 0, r, q);
        parts.push(matmul(&xi, &yi)?);
    }
    stack_rows(&parts)
}
