//! Value-level kernels shared by the tape and by inference code.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let w = logits.last_dim();
    if w == 0 {
        return Err(TensorError::EmptyAxis);
    }
    let mut out = vec![0.0; logits.numel()];
    for (row, o) in logits.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        softmax_row(row, o);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Log-softmax over the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let w = logits.last_dim();
    if w == 0 {
        return Err(TensorError::EmptyAxis);
    }
    let mut out = vec![0.0; logits.numel()];
    for (row, o) in logits.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        log_softmax_row(row, o);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// `-log softmax(logits)[target]` for a single logit vector, as a scalar tensor.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<Tensor> {
    let classes = logits.numel();
    if classes == 0 {
        return Err(TensorError::EmptyAxis);
    }
    if target >= classes {
        return Err(TensorError::IndexOutOfRange {
            index: target,
            classes,
        });
    }
    let mut ls = vec![0.0; classes];
    log_softmax_row(logits.data(), &mut ls);
    // -0.0 would survive as the result when the target already has all the mass
    Ok(Tensor::scalar((-ls[target]).max(0.0)))
}

/// Row-wise Euclidean normalization over the last axis.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(w) {
        let inv = 1.0 / row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `c = a·b (+ c when accumulate)` for strided row-major operands.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with strides
/// `(rsb, csb)`, `c` is dense `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of every operand were checked above; `c` is dense m×n
    // and does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `[m,k]·[k,n]` product of two tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = a.last_dim();
    if b.ndim() != 2 || b.shape()[0] != k {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = a.numel() / k;
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric_pair() {
        let s = softmax(&Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let b = softmax(&Tensor::from_vec(vec![11.0, 12.0, 13.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn softmax_ln2() {
        let s = softmax(&Tensor::from_vec(vec![2f64.ln(), 0.0])).unwrap();
        assert!(close(s.data()[0], 2.0 / 3.0, 1e-12));
        assert!(close(s.data()[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let ce = cross_entropy(&Tensor::from_vec(vec![0.0, 0.0]), 0).unwrap();
        assert!(close(ce.item().unwrap(), 2f64.ln(), 1e-12));
        let ce = cross_entropy(&Tensor::from_vec(vec![1000.0, 0.0]), 0).unwrap();
        let v = ce.item().unwrap();
        assert!(v.is_finite() && (0.0..1e-300).contains(&v));
    }

    #[test]
    fn cross_entropy_rejects_bad_index() {
        let err = cross_entropy(&Tensor::from_vec(vec![0.0, 1.0]), 2).unwrap_err();
        assert_eq!(err, TensorError::IndexOutOfRange { index: 2, classes: 2 });
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
    }
}
