//! Matrix multiply and affine layers backed by `matrixmultiply::sgemm`.

use super::Tensor;
use crate::{Result, VvError};

/// C = alpha * A(m,k) * B(k,n) + beta * C with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(c.len() as isize >= (m as isize - 1) * rsc + (n as isize - 1) * csc + 1);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Tensor {
    /// `[N,D] @ [D,E] -> [N,E]`.
    pub fn matmul(&self, weight: &Tensor) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(VvError::Dimension(format!(
                "matmul: expected rank-2 operands, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(VvError::Dimension(format!(
                "matmul: inner axis mismatch, lhs axis 1 is {} but rhs axis 0 is {}",
                xs[1], ws[0]
            )));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * e];
        gemm(
            n, d, e, 1.0,
            &self.data(), d as isize, 1,
            &weight.data(), e as isize, 1,
            0.0, &mut out, e as isize, 1,
        );
        let (x, w) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            out,
            vec![n, e],
            vec![self.clone(), weight.clone()],
            move |g| {
                // dX = dOut @ W^T
                let mut dx = vec![0.0f32; n * d];
                gemm(
                    n, e, d, 1.0,
                    g, e as isize, 1,
                    &w.data(), 1, e as isize,
                    0.0, &mut dx, d as isize, 1,
                );
                // dW = X^T @ dOut
                let mut dw = vec![0.0f32; d * e];
                gemm(
                    d, n, e, 1.0,
                    &x.data(), 1, d as isize,
                    g, e as isize, 1,
                    0.0, &mut dw, e as isize, 1,
                );
                vec![Some(dx), Some(dw)]
            },
        ))
    }

    /// Affine map `[N,D] @ [D,E] + bias[E]`.
    pub fn dense(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(VvError::Dimension(format!(
                "dense: expected rank-2 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(VvError::Dimension(format!(
                "dense: inner axis mismatch, input axis 1 is {} but weight axis 0 is {}",
                xs[1], ws[0]
            )));
        }
        if bs != [ws[1]] {
            return Err(VvError::Dimension(format!(
                "dense: bias shape {bs:?} does not match output width {}",
                ws[1]
            )));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * e];
        gemm(
            n, d, e, 1.0,
            &self.data(), d as isize, 1,
            &weight.data(), e as isize, 1,
            0.0, &mut out, e as isize, 1,
        );
        {
            let b = bias.data();
            for row in out.chunks_exact_mut(e) {
                for (o, bv) in row.iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
        }
        let (x, w) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            out,
            vec![n, e],
            vec![self.clone(), weight.clone(), bias.clone()],
            move |g| {
                let mut dx = vec![0.0f32; n * d];
                gemm(
                    n, e, d, 1.0,
                    g, e as isize, 1,
                    &w.data(), 1, e as isize,
                    0.0, &mut dx, d as isize, 1,
                );
                let mut dw = vec![0.0f32; d * e];
                gemm(
                    d, n, e, 1.0,
                    &x.data(), 1, d as isize,
                    g, e as isize, 1,
                    0.0, &mut dw, e as isize, 1,
                );
                let mut db = vec![0.0f32; e];
                for row in g.chunks_exact(e) {
                    for (acc, gv) in db.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            },
        ))
    }
}
