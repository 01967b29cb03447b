//! Raw convolution kernels: im2col + single-threaded GEMM.
//!
//! Three primitives cover both convolution and transposed convolution:
//!
//! * [`conv_forward`]      — gather patches, multiply by the filter matrix
//! * [`conv_input_grad`]   — the exact adjoint of `conv_forward` in its input
//! * [`conv_weight_grad`]  — correlation of input patches with the output grad
//!
//! Transposed convolution *is* the adjoint, so its forward pass reuses the
//! scatter kernel ([`deconv_forward`]), its input gradient is a plain
//! `conv_forward`, and its weight gradient is `conv_weight_grad` with the
//! input/gradient roles swapped. This keeps one tested code path for all six
//! directions.
//!
//! Layouts: activations `(n, c, h, w)` row-major; convolution weights
//! `(out_ch, in_ch, kh, kw)`; transposed-convolution weights
//! `(in_ch, out_ch, kh, kw)`. Padding is symmetric and zero-valued.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution output size: `floor((n + 2*pad - k) / stride) + 1` per axis.
pub fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::contract("conv stride must be >= 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::contract(format!(
            "conv kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Transposed-convolution output size: `(n - 1) * stride - 2*pad + k`.
pub fn deconv_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::contract("deconv stride must be >= 1"));
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
    let ow = ((w - 1) * stride + kw).checked_sub(2 * pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::contract(format!(
            "deconv pad {pad} too large for kernel {kh}x{kw}, input {h}x{w}"
        ))),
    }
}

/// Gather: `cols[(c*kh+ky)*kw+kx, oy*ow+ox] = src[c, oy*s+ky-p, ox*s+kx-p]`
/// with zeros outside the image. `src` is one batch item, `(c, h, w)`.
fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    cols.fill(0.0);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = src[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add: the exact transpose of [`im2col`]. `dst` is one batch item.
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[dst_row + ix as usize] += cols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Row-major `C[m,n] = alpha * A[m,k] @ B[k,n] + beta * C`. The stride
/// arguments let callers pass transposed views without copying.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
) {
    debug_assert!(c.len() >= m * n);
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
            n as isize,
            1,
        );
    }
}

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4().map_err(|_| Error::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![0, 0, 0, 0],
    })
}

/// `out[n, co, oy, ox] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[n,ci,oy*s+ky-p,ox*s+kx-p]`
pub fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = expect_rank4("conv_forward/input", input)?;
    let (cout, wcin, kh, kw) = expect_rank4("conv_forward/weight", weight)?;
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "conv_forward",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::contract(format!(
                "conv bias has {} entries, expected {cout}",
                b.len()
            )));
        }
    }
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad)?;
    let k = cin * kh * kw;
    let mut cols = vec![0.0f32; k * oh * ow];
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        im2col(
            &input.data()[b * cin * h * w..(b + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
        );
        gemm(
            cout, k, oh * ow,
            1.0,
            weight.data(), k as isize, 1,
            &cols, (oh * ow) as isize, 1,
            0.0,
            &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow],
        );
    }
    if let Some(bias) = bias {
        for b in 0..n {
            for co in 0..cout {
                let base = (b * cout + co) * oh * ow;
                let bv = bias[co];
                for v in &mut out[base..base + oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Adjoint of [`conv_forward`] with respect to its input: scatters
/// `weight^T @ grad_out` back onto the `(in_h, in_w)` grid.
pub fn conv_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let (n, cout, oh, ow) = expect_rank4("conv_input_grad/grad", grad_out)?;
    let (wcout, cin, kh, kw) = expect_rank4("conv_input_grad/weight", weight)?;
    if cout != wcout {
        return Err(Error::ShapeMismatch {
            op: "conv_input_grad",
            lhs: grad_out.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (h, w) = in_hw;
    let expect = conv_out_hw(h, w, kh, kw, stride, pad)?;
    if expect != (oh, ow) {
        return Err(Error::contract(format!(
            "conv_input_grad: grad grid {oh}x{ow} does not match {}x{} expected from input {h}x{w}",
            expect.0, expect.1
        )));
    }
    let k = cin * kh * kw;
    let mut cols = vec![0.0f32; k * oh * ow];
    let mut out = vec![0.0f32; n * cin * h * w];
    for b in 0..n {
        // cols = W^T (k x cout) @ grad (cout x oh*ow); W^T expressed by strides.
        gemm(
            k, cout, oh * ow,
            1.0,
            weight.data(), 1, k as isize,
            &grad_out.data()[b * cout * oh * ow..(b + 1) * cout * oh * ow], (oh * ow) as isize, 1,
            0.0,
            &mut cols,
        );
        col2im(
            &cols, cin, h, w, kh, kw, stride, pad, oh, ow,
            &mut out[b * cin * h * w..(b + 1) * cin * h * w],
        );
    }
    Tensor::from_vec(&[n, cin, h, w], out)
}

/// Gradient of a convolution with respect to its weights, summed over the
/// batch: `dW[co,ci,ky,kx] = sum_{n,oy,ox} g[n,co,oy,ox] * x[n,ci,oy*s+ky-p,ox*s+kx-p]`.
pub fn conv_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> Result<Tensor> {
    let (n, cin, h, w) = expect_rank4("conv_weight_grad/input", input)?;
    let (gn, cout, oh, ow) = expect_rank4("conv_weight_grad/grad", grad_out)?;
    let (kh, kw) = kernel;
    if gn != n {
        return Err(Error::ShapeMismatch {
            op: "conv_weight_grad",
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let expect = conv_out_hw(h, w, kh, kw, stride, pad)?;
    if expect != (oh, ow) {
        return Err(Error::contract(format!(
            "conv_weight_grad: grad grid {oh}x{ow} does not match {}x{} expected from input {h}x{w}",
            expect.0, expect.1
        )));
    }
    let k = cin * kh * kw;
    let mut cols = vec![0.0f32; k * oh * ow];
    let mut out = vec![0.0f32; cout * k];
    for b in 0..n {
        im2col(
            &input.data()[b * cin * h * w..(b + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
        );
        // dW += grad (cout x oh*ow) @ cols^T (oh*ow x k)
        gemm(
            cout, oh * ow, k,
            1.0,
            &grad_out.data()[b * cout * oh * ow..(b + 1) * cout * oh * ow], (oh * ow) as isize, 1,
            &cols, 1, (oh * ow) as isize,
            1.0,
            &mut out,
        );
    }
    Tensor::from_vec(&[cout, cin, kh, kw], out)
}

/// Transposed convolution (fractionally strided). Weight layout
/// `(in_ch, out_ch, kh, kw)`; output size per [`deconv_out_hw`].
pub fn deconv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = expect_rank4("deconv_forward/input", input)?;
    let (wcin, cout, kh, kw) = expect_rank4("deconv_forward/weight", weight)?;
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "deconv_forward",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::contract(format!(
                "deconv bias has {} entries, expected {cout}",
                b.len()
            )));
        }
    }
    let (oh, ow) = deconv_out_hw(h, w, kh, kw, stride, pad)?;
    let k = cout * kh * kw;
    let mut cols = vec![0.0f32; k * h * w];
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        // cols = W^T (cout*kh*kw x cin) @ x (cin x h*w), then scatter onto
        // the enlarged grid — the same kernel that backs conv_input_grad.
        gemm(
            k, cin, h * w,
            1.0,
            weight.data(), 1, k as isize,
            &input.data()[b * cin * h * w..(b + 1) * cin * h * w], (h * w) as isize, 1,
            0.0,
            &mut cols,
        );
        col2im(
            &cols, cout, oh, ow, kh, kw, stride, pad, h, w,
            &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow],
        );
    }
    if let Some(bias) = bias {
        for b in 0..n {
            for co in 0..cout {
                let base = (b * cout + co) * oh * ow;
                let bv = bias[co];
                for v in &mut out[base..base + oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Input gradient of [`deconv_forward`]: by adjointness this is an ordinary
/// convolution of the output gradient with the same filters.
pub fn deconv_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    // weight (cin, cout, kh, kw) read as a conv filter bank with
    // out_ch = cin, in_ch = cout: exactly the shape conv_forward expects.
    conv_forward(grad_out, weight, None, stride, pad)
}

/// Weight gradient of [`deconv_forward`]: `conv_weight_grad` with the roles
/// of input and gradient exchanged, yielding the `(in_ch, out_ch, kh, kw)`
/// layout directly.
pub fn deconv_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> Result<Tensor> {
    conv_weight_grad(grad_out, input, stride, pad, kernel)
}

/// Per-channel sum of `grad_out` over batch and spatial dims — the bias
/// gradient shared by conv and deconv.
pub fn bias_grad(grad_out: &Tensor) -> Result<Vec<f32>> {
    let (n, c, h, w) = expect_rank4("bias_grad", grad_out)?;
    let mut out = vec![0.0f32; c];
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * h * w;
            let mut acc = 0.0f64;
            for &v in &grad_out.data()[base..base + h * w] {
                acc += v as f64;
            }
            out[ci] += acc as f32;
        }
    }
    Ok(out)
}
