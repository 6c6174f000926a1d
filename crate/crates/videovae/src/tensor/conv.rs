//! Valid (unpadded) 2-d convolution and its adjoint, via im2col + GEMM.
//!
//! `conv2d_transpose` scatters exactly where `conv2d` gathered, so with a
//! layout-swapped kernel the two maps are adjoint:
//! `<conv2d(u), v> == <u, conv2d_transpose(v)>` whenever the shapes line up.
//! An explicit `output_padding` extends the transpose output with zero rows
//! on the bottom/right edge, recovering input sizes that a strided forward
//! convolution cropped.

use super::linalg::gemm;
use super::Tensor;
use crate::{Result, VvError};

/// Gather sliding windows: `src[c, sh, sw]` -> `cols[ph*pw, c*kh*kw]`,
/// window origin for position (p, q) at (p*stride, q*stride).
#[allow(clippy::too_many_arguments)]
fn gather_cols(
    src: &[f32],
    c: usize,
    sh: usize,
    sw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    cols: &mut [f32],
) {
    let ckk = c * kh * kw;
    for p in 0..ph {
        for q in 0..pw {
            let row = (p * pw + q) * ckk;
            for cc in 0..c {
                let plane = cc * sh * sw;
                for i in 0..kh {
                    let src_base = plane + (p * stride + i) * sw + q * stride;
                    let dst_base = row + (cc * kh + i) * kw;
                    cols[dst_base..dst_base + kw]
                        .copy_from_slice(&src[src_base..src_base + kw]);
                }
            }
        }
    }
}

/// Adjoint of [`gather_cols`]: scatter-add `cols[ph*pw, c*kh*kw]` into
/// `out[c, th, tw]`.
#[allow(clippy::too_many_arguments)]
fn scatter_cols(
    cols: &[f32],
    c: usize,
    th: usize,
    tw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    out: &mut [f32],
) {
    let ckk = c * kh * kw;
    for p in 0..ph {
        for q in 0..pw {
            let row = (p * pw + q) * ckk;
            for cc in 0..c {
                let plane = cc * th * tw;
                for i in 0..kh {
                    let dst_base = plane + (p * stride + i) * tw + q * stride;
                    let src_base = row + (cc * kh + i) * kw;
                    for j in 0..kw {
                        out[dst_base + j] += cols[src_base + j];
                    }
                }
            }
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn check_conv_args(
    op: &str,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    k_out_axis: usize,
) -> Result<ConvDims> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 4 {
        return Err(VvError::Dimension(format!(
            "{op}: input must be rank 4 [N,C,H,W], got {is:?}"
        )));
    }
    if ks.len() != 4 {
        return Err(VvError::Dimension(format!(
            "{op}: kernel must be rank 4, got {ks:?}"
        )));
    }
    if stride == 0 {
        return Err(VvError::Parameter(format!("{op}: stride must be >= 1")));
    }
    let k_in_axis = 1 - k_out_axis;
    if is[1] != ks[k_in_axis] {
        return Err(VvError::Dimension(format!(
            "{op}: channel mismatch, input axis 1 is {} but kernel axis {k_in_axis} is {}",
            is[1], ks[k_in_axis]
        )));
    }
    if bias.shape() != [ks[k_out_axis]] {
        return Err(VvError::Dimension(format!(
            "{op}: bias shape {:?} does not match {} output channels",
            bias.shape(),
            ks[k_out_axis]
        )));
    }
    Ok(ConvDims {
        n: is[0],
        cin: is[1],
        h: is[2],
        w: is[3],
        kh: ks[2],
        kw: ks[3],
    })
}

impl Tensor {
    /// Valid convolution: `[N,C,H,W] x [K,C,kh,kw] -> [N,K,H',W']` with
    /// `H' = floor((H-kh)/stride)+1`.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let d = check_conv_args("conv2d", self, kernel, bias, stride, 0)?;
        if d.kh > d.h || d.kw > d.w {
            return Err(VvError::Dimension(format!(
                "conv2d: kernel {}x{} exceeds input plane {}x{} (axes 2, 3)",
                d.kh, d.kw, d.h, d.w
            )));
        }
        let k_out = kernel.shape()[0];
        let oh = (d.h - d.kh) / stride + 1;
        let ow = (d.w - d.kw) / stride + 1;
        let (ckk, ohw, in_plane) = (d.cin * d.kh * d.kw, oh * ow, d.cin * d.h * d.w);

        let mut out = vec![0.0f32; d.n * k_out * ohw];
        let mut cols = vec![0.0f32; ohw * ckk];
        {
            let x = self.data();
            let ker = kernel.data();
            let b = bias.data();
            for s in 0..d.n {
                gather_cols(
                    &x[s * in_plane..(s + 1) * in_plane],
                    d.cin, d.h, d.w, d.kh, d.kw, stride, oh, ow, &mut cols,
                );
                let dst = &mut out[s * k_out * ohw..(s + 1) * k_out * ohw];
                // out[k, p] = ker(K,CKK) @ cols^T(CKK, OHW)
                gemm(
                    k_out, ckk, ohw, 1.0,
                    &ker, ckk as isize, 1,
                    &cols, 1, ckk as isize,
                    0.0, dst, ohw as isize, 1,
                );
                for (k, plane) in dst.chunks_exact_mut(ohw).enumerate() {
                    for v in plane.iter_mut() {
                        *v += b[k];
                    }
                }
            }
        }

        let (x, ker) = (self.clone(), kernel.clone());
        let (n, cin, h, w, kh, kw) = (d.n, d.cin, d.h, d.w, d.kh, d.kw);
        Ok(Tensor::from_op(
            out,
            vec![n, k_out, oh, ow],
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                let xd = x.data();
                let kd = ker.data();
                let mut dx = vec![0.0f32; n * cin * h * w];
                let mut dk = vec![0.0f32; k_out * ckk];
                let mut db = vec![0.0f32; k_out];
                let mut cols = vec![0.0f32; ohw * ckk];
                let mut dcols = vec![0.0f32; ohw * ckk];
                for s in 0..n {
                    let go = &g[s * k_out * ohw..(s + 1) * k_out * ohw];
                    gather_cols(
                        &xd[s * in_plane..(s + 1) * in_plane],
                        cin, h, w, kh, kw, stride, oh, ow, &mut cols,
                    );
                    // dK += dOut(K,OHW) @ cols(OHW,CKK)
                    gemm(
                        k_out, ohw, ckk, 1.0,
                        go, ohw as isize, 1,
                        &cols, ckk as isize, 1,
                        1.0, &mut dk, ckk as isize, 1,
                    );
                    // dCols = dOut^T(OHW,K) @ ker(K,CKK)
                    gemm(
                        ohw, k_out, ckk, 1.0,
                        go, 1, ohw as isize,
                        &kd, ckk as isize, 1,
                        0.0, &mut dcols, ckk as isize, 1,
                    );
                    scatter_cols(
                        &dcols,
                        cin, h, w, kh, kw, stride, oh, ow,
                        &mut dx[s * in_plane..(s + 1) * in_plane],
                    );
                    for (k, plane) in go.chunks_exact(ohw).enumerate() {
                        db[k] += plane.iter().sum::<f32>();
                    }
                }
                vec![Some(dx), Some(dk), Some(db)]
            },
        ))
    }

    /// Transposed (fractionally strided) convolution:
    /// `[N,C,H,W] x [C,K,kh,kw] -> [N,K,H'',W'']` with
    /// `H'' = (H-1)*stride + kh + output_padding`.
    pub fn conv2d_transpose(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let d = check_conv_args("conv2d_transpose", self, kernel, bias, stride, 1)?;
        if output_padding >= stride && output_padding > 0 {
            return Err(VvError::Parameter(format!(
                "conv2d_transpose: output_padding {output_padding} must be < stride {stride}"
            )));
        }
        let k_out = kernel.shape()[1];
        let oh = (d.h - 1) * stride + d.kh + output_padding;
        let ow = (d.w - 1) * stride + d.kw + output_padding;
        let (kkk, hw) = (k_out * d.kh * d.kw, d.h * d.w);
        let (in_plane, out_plane) = (d.cin * hw, k_out * oh * ow);

        let mut out = vec![0.0f32; d.n * out_plane];
        let mut cols = vec![0.0f32; hw * kkk];
        {
            let x = self.data();
            let ker = kernel.data();
            let b = bias.data();
            for s in 0..d.n {
                // cols(HW,KKK) = in^T(HW,C) @ ker(C,KKK)
                gemm(
                    hw, d.cin, kkk, 1.0,
                    &x[s * in_plane..], 1, hw as isize,
                    &ker, kkk as isize, 1,
                    0.0, &mut cols, kkk as isize, 1,
                );
                let dst = &mut out[s * out_plane..(s + 1) * out_plane];
                scatter_cols(&cols, k_out, oh, ow, d.kh, d.kw, stride, d.h, d.w, dst);
                for (k, plane) in dst.chunks_exact_mut(oh * ow).enumerate() {
                    for v in plane.iter_mut() {
                        *v += b[k];
                    }
                }
            }
        }

        let (x, ker) = (self.clone(), kernel.clone());
        let (n, cin, h, w, kh, kw) = (d.n, d.cin, d.h, d.w, d.kh, d.kw);
        Ok(Tensor::from_op(
            out,
            vec![n, k_out, oh, ow],
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                let xd = x.data();
                let kd = ker.data();
                let mut dx = vec![0.0f32; n * in_plane];
                let mut dk = vec![0.0f32; cin * kkk];
                let mut db = vec![0.0f32; k_out];
                let mut dcols = vec![0.0f32; hw * kkk];
                for s in 0..n {
                    let go = &g[s * out_plane..(s + 1) * out_plane];
                    gather_cols(go, k_out, oh, ow, kh, kw, stride, h, w, &mut dcols);
                    // dIn^T(HW,C) = dCols(HW,KKK) @ ker^T(KKK,C), written transposed
                    gemm(
                        hw, kkk, cin, 1.0,
                        &dcols, kkk as isize, 1,
                        &kd, 1, kkk as isize,
                        0.0, &mut dx[s * in_plane..(s + 1) * in_plane], 1, hw as isize,
                    );
                    // dKer += in(C,HW) @ dCols(HW,KKK)
                    gemm(
                        cin, hw, kkk, 1.0,
                        &xd[s * in_plane..], hw as isize, 1,
                        &dcols, kkk as isize, 1,
                        1.0, &mut dk, kkk as isize, 1,
                    );
                    for (k, plane) in go.chunks_exact(oh * ow).enumerate() {
                        db[k] += plane.iter().sum::<f32>();
                    }
                }
                vec![Some(dx), Some(dk), Some(db)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::from_vec(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let k = Tensor::from_vec(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let data: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data.clone(), &[1, 1, 5, 5]).unwrap();
        let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let k = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let err = x.conv2d(&k, &b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 1"), "got: {msg}");
    }

    #[test]
    fn conv_spatial_chain_reaches_1280() {
        // 64 ->(k9,s1) 56 ->(k7,s3) 17 ->(k5,s1) 13 ->(k3,s3) 4, channels 80,
        // flatten 80*4*4 = 1280
        let mut x = Tensor::zeros(&[1, 3, 64, 64]);
        let plan = [(9usize, 10usize, 1usize), (7, 20, 3), (5, 40, 1), (3, 80, 3)];
        let mut cin = 3;
        for (k, cout, s) in plan {
            let ker = Tensor::zeros(&[cout, cin, k, k]);
            let b = Tensor::zeros(&[cout]);
            x = x.conv2d(&ker, &b, s).unwrap();
            cin = cout;
        }
        assert_eq!(x.shape(), &[1, 80, 4, 4]);
        assert_eq!(x.numel(), 1280);
    }

    #[test]
    fn transpose_broadcasts_single_unit() {
        let x = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let k = Tensor::from_vec(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d_transpose(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(u), v> == <u, conv_transpose(v)> on 1x2x6x6, random values.
        // The conv kernel [K,C,kh,kw] is reused as-is: for the transpose its
        // axis 0 is the input (K) side and axis 1 the output (C) side.
        let mut rng = super::super::RngStream::new(11);
        for &(k, s) in &[(3usize, 1usize), (2, 2), (3, 3)] {
            let u_data: Vec<f32> = (0..72).map(|_| rng.normal()).collect();
            let u = Tensor::from_vec(u_data, &[1, 2, 6, 6]).unwrap();
            let ker_data: Vec<f32> = (0..3 * 2 * k * k).map(|_| rng.normal()).collect();
            let ker = Tensor::from_vec(ker_data, &[3, 2, k, k]).unwrap();
            let zero_k = Tensor::zeros(&[3]);
            let zero_c = Tensor::zeros(&[2]);

            let cu = u.conv2d(&ker, &zero_k, s).unwrap();
            let v_data: Vec<f32> = (0..cu.numel()).map(|_| rng.normal()).collect();
            let v = Tensor::from_vec(v_data, cu.shape()).unwrap();

            let op = 6 - ((cu.shape()[2] - 1) * s + k);
            let tv = v.conv2d_transpose(&ker, &zero_c, s, op).unwrap();
            assert_eq!(tv.shape(), u.shape());

            let lhs: f64 = cu
                .data()
                .iter()
                .zip(v.data().iter())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            let rhs: f64 = u
                .data()
                .iter()
                .zip(tv.data().iter())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            assert!(
                (lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1.0),
                "k={k} s={s}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transpose_chain_mirrors_encoder_dims() {
        // 4 -> 13 -> 17 -> 56 -> 64 reverses 64 -> 56 -> 17 -> 13 -> 4
        let mut x = Tensor::zeros(&[1, 80, 4, 4]);
        let plan = [
            (3usize, 80usize, 3usize, 1usize),
            (5, 40, 1, 0),
            (7, 20, 3, 1),
            (9, 10, 1, 0),
        ];
        let mut cin = 80;
        let mut dims = vec![4usize];
        for (k, cout, s, op) in plan {
            let ker = Tensor::zeros(&[cin, cout, k, k]);
            let b = Tensor::zeros(&[cout]);
            x = x.conv2d_transpose(&ker, &b, s, op).unwrap();
            dims.push(x.shape()[2]);
            cin = cout;
        }
        assert_eq!(dims, vec![4, 13, 17, 56, 64]);
        assert_eq!(x.shape(), &[1, 10, 64, 64]);
    }

    #[test]
    fn conv_grad_matches_finite_difference_spot() {
        // one coordinate, hand central difference
        let mut rng = super::super::RngStream::new(5);
        let x_data: Vec<f32> = (0..16).map(|_| rng.normal()).collect();
        let k_data: Vec<f32> = (0..4).map(|_| rng.normal()).collect();
        let eval = |x_data: &[f32]| -> f32 {
            let x = Tensor::from_vec(x_data.to_vec(), &[1, 1, 4, 4]).unwrap();
            let k = Tensor::from_vec(k_data.clone(), &[1, 1, 2, 2]).unwrap();
            let b = Tensor::zeros(&[1]);
            let y = x.conv2d(&k, &b, 2).unwrap();
            // square so the gradient depends on x
            y.mul(&y).unwrap().sum_all().item().unwrap()
        };
        let x = Tensor::param(x_data.clone(), &[1, 1, 4, 4]).unwrap();
        let k = Tensor::from_vec(k_data.clone(), &[1, 1, 2, 2]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 2).unwrap();
        y.mul(&y).unwrap().sum_all().backward().unwrap();
        let analytic = x.grad().unwrap();

        let eps = 1e-3;
        for idx in [0usize, 5, 10, 15] {
            let mut plus = x_data.clone();
            plus[idx] += eps;
            let mut minus = x_data.clone();
            minus[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[idx] - numeric).abs() / denom < 1e-2,
                "idx {idx}: analytic {} numeric {numeric}",
                analytic[idx]
            );
        }
    }
}
