//! im2col-based 2-D convolution kernels for single CHW images.
//!
//! Convolutions are lowered to one GEMM per image: the receptive fields are
//! unrolled into a `[cin*kh*kw, hout*wout]` matrix and multiplied by the
//! weight matrix `[cout, cin*kh*kw]`. The backward pass reuses the same
//! lowering (`col2im` scatters gradients back to the input). Stride-1 rows
//! move as contiguous slices; only strided convolutions fall back to
//! per-element gathers.

use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayView4, Axis, CowArray, Ix3};

/// Output spatial size for a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn as_standard<'a>(x: &'a ArrayView3<'a, f64>) -> CowArray<'a, f64, Ix3> {
    if x.is_standard_layout() {
        CowArray::from(x.view())
    } else {
        CowArray::from(x.to_owned())
    }
}

/// Valid output-column range [j_lo, j_hi) for a stride-1 kernel offset.
fn stride1_span(w: usize, wout: usize, dj: usize, pad: usize) -> (usize, usize) {
    let j_lo = pad.saturating_sub(dj);
    let j_hi = (w + pad - dj).min(wout);
    (j_lo, j_hi.max(j_lo))
}

/// Unroll receptive fields of `x` ([cin, h, w]) into columns.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let xc = as_standard(x);
    let xs = xc.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((cin * kh * kw, hout * wout));
    let cs = col.as_slice_mut().expect("freshly allocated");

    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row_base = ((c * kh + di) * kw + dj) * hout * wout;
                for i in 0..hout {
                    let src_i = (i * stride + di) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + src_i as usize) * w;
                    let dst = row_base + i * wout;
                    if stride == 1 {
                        let (j_lo, j_hi) = stride1_span(w, wout, dj, pad);
                        if j_lo < j_hi {
                            let src_lo = src_row + (j_lo + dj - pad);
                            cs[dst + j_lo..dst + j_hi]
                                .copy_from_slice(&xs[src_lo..src_lo + (j_hi - j_lo)]);
                        }
                    } else {
                        for j in 0..wout {
                            let src_j = (j * stride + dj) as isize - pad as isize;
                            if src_j >= 0 && src_j < w as isize {
                                cs[dst + j] = xs[src_row + src_j as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add columns back to input layout; adjoint of [`im2col`].
pub fn col2im(
    col: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let cs = col.as_slice().expect("col is standard layout");
    let mut x = Array3::<f64>::zeros((cin, h, w));
    let xs = x.as_slice_mut().expect("freshly allocated");

    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row_base = ((c * kh + di) * kw + dj) * hout * wout;
                for i in 0..hout {
                    let src_i = (i * stride + di) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + src_i as usize) * w;
                    let src = row_base + i * wout;
                    if stride == 1 {
                        let (j_lo, j_hi) = stride1_span(w, wout, dj, pad);
                        if j_lo < j_hi {
                            let dst_lo = dst_row + (j_lo + dj - pad);
                            let dst_seg = &mut xs[dst_lo..dst_lo + (j_hi - j_lo)];
                            let src_seg = &cs[src + j_lo..src + j_hi];
                            for (d, s) in dst_seg.iter_mut().zip(src_seg) {
                                *d += s;
                            }
                        }
                    } else {
                        for j in 0..wout {
                            let src_j = (j * stride + dj) as isize - pad as isize;
                            if src_j >= 0 && src_j < w as isize {
                                xs[dst_row + src_j as usize] += cs[src + j];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. `w` is [cout, cin, kh, kw]; bias is per output channel.
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d: input/weight channel mismatch");
    assert_eq!(b.len(), cout, "conv2d: bias length mismatch");
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(wd, kw, stride, pad);

    let col = im2col(x, kh, kw, stride, pad);
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weights are standard layout");
    let mut out2 = w2.dot(&col);
    for (mut row, &bias) in out2.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row += bias;
    }
    out2
        .into_shape_with_order((cout, hout, wout))
        .expect("conv output reshape")
}

/// Gradients of a convolution w.r.t. input, weights and bias.
pub fn conv2d_backward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    g_out: &ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>) {
    let (cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (gc, gh, gw) = g_out.dim();
    assert_eq!(gc, cout, "conv2d backward: channel mismatch");

    let g_std = as_standard(g_out);
    let g2 = g_std
        .to_shape((cout, gh * gw))
        .expect("grad output standard layout");
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weights are standard layout");

    let d_col = w2.t().dot(&g2);
    let d_x = col2im(&d_col, cin, h, wd, kh, kw, stride, pad);

    let col = im2col(x, kh, kw, stride, pad);
    let d_w2 = g2.dot(&col.t());
    let d_w = d_w2
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad reshape");

    let d_b = g2.sum_axis(Axis(1));
    (d_x, d_w, d_b)
}
