//! Bilinear interpolation with half-pixel centers.
//!
//! One weight table is shared by the differentiable graph op and the pure
//! attention-map resampler so both paths produce bit-identical values.

/// Per-output-index source taps: (lo, hi, weight_lo, weight_hi).
pub type Taps = Vec<(usize, usize, f64, f64)>;

/// Sampling taps mapping `dst` output positions onto `src` input positions
/// using half-pixel center alignment: src = (dst + 0.5) * src_len/dst_len - 0.5.
pub fn bilinear_taps(src_len: usize, dst_len: usize) -> Taps {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            let w_hi = s - lo as f64;
            (lo, hi, 1.0 - w_hi, w_hi)
        })
        .collect()
}

/// Resample a 2-D map to (th, tw).
pub fn upsample_bilinear_2d(
    src: &ndarray::ArrayView2<f64>,
    th: usize,
    tw: usize,
) -> ndarray::Array2<f64> {
    let (h, w) = src.dim();
    let rows = bilinear_taps(h, th);
    let cols = bilinear_taps(w, tw);
    ndarray::Array2::from_shape_fn((th, tw), |(i, j)| {
        let (r0, r1, wr0, wr1) = rows[i];
        let (c0, c1, wc0, wc1) = cols[j];
        wr0 * (wc0 * src[[r0, c0]] + wc1 * src[[r0, c1]])
            + wr1 * (wc0 * src[[r1, c0]] + wc1 * src[[r1, c1]])
    })
}

/// Adjoint of [`upsample_bilinear_2d`]: scatter output-space gradients back.
pub fn upsample_bilinear_2d_backward(
    g_out: &ndarray::ArrayView2<f64>,
    src_h: usize,
    src_w: usize,
) -> ndarray::Array2<f64> {
    let (th, tw) = g_out.dim();
    let rows = bilinear_taps(src_h, th);
    let cols = bilinear_taps(src_w, tw);
    let mut g_in = ndarray::Array2::<f64>::zeros((src_h, src_w));
    for i in 0..th {
        let (r0, r1, wr0, wr1) = rows[i];
        for j in 0..tw {
            let (c0, c1, wc0, wc1) = cols[j];
            let g = g_out[[i, j]];
            g_in[[r0, c0]] += g * wr0 * wc0;
            g_in[[r0, c1]] += g * wr0 * wc1;
            g_in[[r1, c0]] += g * wr1 * wc0;
            g_in[[r1, c1]] += g * wr1 * wc1;
        }
    }
    g_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_size_is_identity() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let out = upsample_bilinear_2d(&m.view(), 2, 2);
        assert_eq!(m, out);
    }

    #[test]
    fn constant_stays_constant() {
        let m = ndarray::Array2::from_elem((3, 3), 0.42);
        let out = upsample_bilinear_2d(&m.view(), 10, 7);
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn upsample_preserves_value_range() {
        let m = array![[0.0, 1.0], [0.25, 0.5]];
        let out = upsample_bilinear_2d(&m.view(), 9, 9);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn backward_is_adjoint() {
        let src = array![[0.3, -0.1, 2.0], [0.9, 0.0, -1.5]];
        let g = ndarray::Array2::from_shape_fn((5, 8), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        let fwd = upsample_bilinear_2d(&src.view(), 5, 8);
        let lhs: f64 = (&fwd * &g).sum();
        let back = upsample_bilinear_2d_backward(&g.view(), 2, 3);
        let rhs: f64 = (&src * &back).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
