//! Convolution, pooling, and upsampling kernels.
//!
//! Convolution is im2col + SGEMM per sample. The batch dimension runs in
//! parallel; every output element is written by exactly one task and the
//! weight gradient is reduced in sample order, so results are independent
//! of the worker count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Safe wrapper around `matrixmultiply::sgemm` for row-major slices with
/// explicit strides. `c += alpha * a(m,k) * b(k,n)` when `beta == 1`.
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

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfold one sample `[C, H, W]` into columns `[C*kh*kw, oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    sample: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let plane = h * w;
    let out_plane = oh * ow;
    for c in 0..channels {
        let chan = &sample[c * plane..(c + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * out_plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns `[C*kh*kw, oh*ow]` back into one sample `[C, H, W]`,
/// accumulating where patches overlap.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    sample: &mut [f32],
) {
    let plane = h * w;
    let out_plane = oh * ow;
    for c in 0..channels {
        let chan = &mut sample[c * plane..(c + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * out_plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            chan[iy as usize * w + ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_shape(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvShape> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::dim("conv2d", "input channels", wcin, cin));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim("conv2d", "bias length", cout, bias.numel()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (padding {padding})"),
        ));
    }
    Ok(ConvShape {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: conv_out_extent(h, kh, stride, padding),
        ow: conv_out_extent(w, kw, stride, padding),
        stride,
        padding,
    })
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    shape: &ConvShape,
) -> Tensor {
    let &ConvShape {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    } = shape;
    let col_rows = cin * kh * kw;
    let out_plane = oh * ow;
    let in_sample = cin * h * w;
    let out_sample = cout * out_plane;

    let mut out = vec![0.0f32; n * out_sample];
    out.par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(s, out_s)| {
            let mut cols = vec![0.0f32; col_rows * out_plane];
            im2col(
                &input.data()[s * in_sample..(s + 1) * in_sample],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            // out[cout, oh*ow] = weight[cout, col_rows] * cols[col_rows, oh*ow]
            gemm(
                cout,
                col_rows,
                out_plane,
                1.0,
                weight.data(),
                col_rows as isize,
                1,
                &cols,
                out_plane as isize,
                1,
                0.0,
                out_s,
            );
            for c in 0..cout {
                let b = bias.data()[c];
                for v in &mut out_s[c * out_plane..(c + 1) * out_plane] {
                    *v += b;
                }
            }
        });

    Tensor::new(vec![n, cout, oh, ow], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    shape: &ConvShape,
) -> ConvGrads {
    let &ConvShape {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    } = shape;
    let col_rows = cin * kh * kw;
    let out_plane = oh * ow;
    let in_sample = cin * h * w;
    let out_sample = cout * out_plane;
    let wlen = weight.numel();

    struct SampleGrads {
        weight: Vec<f32>,
        bias: Vec<f32>,
    }

    let mut grad_input = vec![0.0f32; n * in_sample];
    let per_sample: Vec<SampleGrads> = grad_input
        .par_chunks_mut(in_sample)
        .enumerate()
        .map(|(s, gin_s)| {
            let gout_s = &grad_out[s * out_sample..(s + 1) * out_sample];
            // d_cols[col_rows, out_plane] = weight^T[col_rows, cout] * gout[cout, out_plane]
            let mut dcols = vec![0.0f32; col_rows * out_plane];
            gemm(
                col_rows,
                cout,
                out_plane,
                1.0,
                weight.data(),
                1,
                col_rows as isize,
                gout_s,
                out_plane as isize,
                1,
                0.0,
                &mut dcols,
            );
            col2im(
                &dcols, cin, h, w, kh, kw, stride, padding, oh, ow, gin_s,
            );

            // d_weight[cout, col_rows] = gout[cout, out_plane] * cols^T[out_plane, col_rows]
            let mut cols = dcols; // reuse the buffer
            im2col(
                &input.data()[s * in_sample..(s + 1) * in_sample],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            let mut gw = vec![0.0f32; wlen];
            gemm(
                cout,
                out_plane,
                col_rows,
                1.0,
                gout_s,
                out_plane as isize,
                1,
                &cols,
                1,
                out_plane as isize,
                0.0,
                &mut gw,
            );
            let mut gb = vec![0.0f32; cout];
            for c in 0..cout {
                let mut acc = 0.0f64;
                for v in &gout_s[c * out_plane..(c + 1) * out_plane] {
                    acc += *v as f64;
                }
                gb[c] = acc as f32;
            }
            SampleGrads {
                weight: gw,
                bias: gb,
            }
        })
        .collect();

    // Reduce weight/bias gradients in fixed sample order.
    let mut grad_weight = vec![0.0f32; wlen];
    let mut grad_bias = vec![0.0f32; cout];
    for sg in &per_sample {
        for (a, b) in grad_weight.iter_mut().zip(&sg.weight) {
            *a += b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&sg.bias) {
            *a += b;
        }
    }

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each selected maximum (first occurrence in row-major
/// order wins on ties).
pub(crate) fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("height {h} is odd; 2x pooling needs even extents"),
        ));
    }
    if w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("width {w} is odd; 2x pooling needs even extents"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        let base_out = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + (2 * ox + dx);
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[base_out + oy * ow + ox] = best;
                argmax[base_out + oy * ow + ox] = (nc * h * w + best_idx) as u32;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let data = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        let out_plane = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                out_plane[(2 * y) * ow + 2 * x] = v;
                out_plane[(2 * y) * ow + 2 * x + 1] = v;
                out_plane[(2 * y + 1) * ow + 2 * x] = v;
                out_plane[(2 * y + 1) * ow + 2 * x + 1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Gradient of [`upsample2_forward`]: each input cell receives the sum of
/// its four children.
pub(crate) fn upsample2_backward(grad_out: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_in = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let gout = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        let gin = &mut grad_in[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                gin[y * w + x] = gout[(2 * y) * ow + 2 * x]
                    + gout[(2 * y) * ow + 2 * x + 1]
                    + gout[(2 * y + 1) * ow + 2 * x]
                    + gout[(2 * y + 1) * ow + 2 * x + 1];
            }
        }
    }
    grad_in
}
