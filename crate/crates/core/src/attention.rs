//! Attention-map math: Grad-CAM, min-max normalization, bilinear resampling,
//! co-attention fusion, anti-attention inversion and mass statistics.
//!
//! All operations here are pure functions over 2-D maps. Grad-CAM takes the
//! tap-layer features and the gradient of a task score with respect to them;
//! producing those inputs is the model layer's job.

use crate::error::{CtaError, Result};
use crate::tensor::upsample_bilinear_2d;
use ndarray::{Array2, Array3, ArrayView3, Axis};

/// Nonnegative 2-D saliency field. `normalized` marks maps scaled to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl AttentionMap {
    /// Wrap a raw (unnormalized) map, validating nonnegativity.
    pub fn raw(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CtaError::NonFinite("attention map".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(CtaError::InvalidInput(
                "attention map values must be nonnegative".into(),
            ));
        }
        Ok(AttentionMap {
            values,
            normalized: false,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Fused attention over all tasks; values in [0,1] at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionMap {
    pub values: Array2<f64>,
}

/// Pointwise complement of a [`CoAttentionMap`]; the self-supervision target.
#[derive(Debug, Clone, PartialEq)]
pub struct AntiAttentionMap {
    pub values: Array2<f64>,
}

/// Grad-CAM: channel weights are spatially averaged gradients, the map is
/// the rectified weighted channel sum. Output is raw (not normalized).
pub fn grad_cam(features: &ArrayView3<f64>, grads: &ArrayView3<f64>) -> Result<AttentionMap> {
    if features.dim() != grads.dim() {
        return Err(CtaError::InvalidInput(format!(
            "grad_cam shape mismatch: features {:?} vs grads {:?}",
            features.dim(),
            grads.dim()
        )));
    }
    if features.iter().chain(grads.iter()).any(|v| !v.is_finite()) {
        return Err(CtaError::NonFinite("grad_cam inputs".into()));
    }
    let (k, h, w) = features.dim();
    let z = (h * w) as f64;
    let mut map = Array2::<f64>::zeros((h, w));
    for c in 0..k {
        let alpha = grads.index_axis(Axis(0), c).sum() / z;
        map.scaled_add(alpha, &features.index_axis(Axis(0), c));
    }
    map.mapv_inplace(|v| v.max(0.0));
    Ok(AttentionMap {
        values: map,
        normalized: false,
    })
}

/// Per-channel Grad-CAM weights (spatially averaged gradients).
pub fn grad_cam_weights(grads: &ArrayView3<f64>) -> ndarray::Array1<f64> {
    let (k, h, w) = grads.dim();
    let z = (h * w) as f64;
    ndarray::Array1::from_shape_fn(k, |c| grads.index_axis(Axis(0), c).sum() / z)
}

/// Min-max scale to [0,1]. A constant map carries no localization signal and
/// collapses to all zeros.
pub fn normalize_map(m: &AttentionMap) -> Result<AttentionMap> {
    if m.values.iter().any(|&v| v < 0.0) {
        return Err(CtaError::InvalidInput(
            "normalize_map requires nonnegative input".into(),
        ));
    }
    Ok(AttentionMap {
        values: minmax_scale(&m.values),
        normalized: true,
    })
}

/// The shared min-max kernel; also used by the in-graph training path.
pub fn minmax_scale(values: &Array2<f64>) -> Array2<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        Array2::zeros(values.dim())
    } else {
        values.mapv(|v| (v - lo) / (hi - lo))
    }
}

/// Bilinear resample to (h, w); upsampling only.
pub fn upsample_map(m: &AttentionMap, h: usize, w: usize) -> Result<AttentionMap> {
    let (sh, sw) = m.shape();
    if h < sh || w < sw {
        return Err(CtaError::InvalidInput(format!(
            "upsample_map target {h}x{w} smaller than source {sh}x{sw}"
        )));
    }
    Ok(AttentionMap {
        values: upsample_bilinear_2d(&m.values.view(), h, w),
        normalized: m.normalized,
    })
}

/// Fuse per-task normalized maps: mean over tasks, re-scaled to [0,1].
pub fn co_attention(maps: &[AttentionMap]) -> Result<CoAttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| CtaError::InvalidInput("co_attention needs at least one map".into()))?;
    let dim = first.values.dim();
    for m in maps {
        if !m.normalized {
            return Err(CtaError::InvalidInput(
                "co_attention inputs must be normalized".into(),
            ));
        }
        if m.values.dim() != dim {
            return Err(CtaError::InvalidInput(
                "co_attention inputs must share one shape".into(),
            ));
        }
        if m.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CtaError::InvalidInput(
                "normalized map out of [0,1]".into(),
            ));
        }
    }
    let mut mean = Array2::<f64>::zeros(dim);
    for m in maps {
        mean += &m.values;
    }
    mean /= maps.len() as f64;
    Ok(CoAttentionMap {
        values: minmax_scale(&mean),
    })
}

/// Invert co-attention: the regions no task attends to.
pub fn anti_attention(co: &CoAttentionMap) -> Result<AntiAttentionMap> {
    if co.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CtaError::InvalidInput(
            "co-attention values out of [0,1]".into(),
        ));
    }
    Ok(AntiAttentionMap {
        values: co.values.mapv(|v| 1.0 - v),
    })
}

/// Fraction of total attention mass inside a binary region mask.
pub fn attention_mass_fraction(m: &AttentionMap, region_mask: &Array2<bool>) -> Result<f64> {
    if m.values.dim() != region_mask.dim() {
        return Err(CtaError::InvalidInput(format!(
            "mass fraction shape mismatch: {:?} vs {:?}",
            m.values.dim(),
            region_mask.dim()
        )));
    }
    let total: f64 = m.values.sum();
    if total <= 0.0 {
        return Err(CtaError::InvalidInput(
            "undefined mass fraction: attention map sums to zero".into(),
        ));
    }
    let inside: f64 = m
        .values
        .iter()
        .zip(region_mask.iter())
        .filter(|(_, &inside)| inside)
        .map(|(&v, _)| v)
        .sum();
    Ok(inside / total)
}

/// Grad-CAM on plain arrays, normalized and resampled to image resolution.
/// The standard clean-attention pipeline: Grad-CAM, scale, upsample.
pub fn attention_at_image_resolution(
    features: &Array3<f64>,
    grads: &Array3<f64>,
    image_h: usize,
    image_w: usize,
) -> Result<AttentionMap> {
    let cam = grad_cam(&features.view(), &grads.view())?;
    let normed = normalize_map(&cam)?;
    upsample_map(&normed, image_h, image_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    fn map(values: Array2<f64>, normalized: bool) -> AttentionMap {
        AttentionMap { values, normalized }
    }

    #[test]
    fn grad_cam_direct_evaluation() {
        // K=1, F=[[1,2],[3,4]], grads all 0.5 -> alpha=0.5, map=0.5*F.
        let f = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Array3::from_elem((1, 2, 2), 0.5);
        let cam = grad_cam(&f.view(), &g.view()).unwrap();
        assert_eq!(cam.values, arr2(&[[0.5, 1.0], [1.5, 2.0]]));
        assert!(!cam.normalized);
    }

    #[test]
    fn grad_cam_negative_combination_is_rectified() {
        let f = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Array3::from_elem((1, 2, 2), -1.0);
        let cam = grad_cam(&f.view(), &g.view()).unwrap();
        assert!(cam.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_rejects_non_finite() {
        let f = Array3::from_elem((1, 2, 2), f64::NAN);
        let g = Array3::from_elem((1, 2, 2), 0.5);
        assert!(grad_cam(&f.view(), &g.view()).is_err());
    }

    #[test]
    fn normalize_minmax_arithmetic() {
        let m = map(arr2(&[[0.0, 2.0], [4.0, 8.0]]), false);
        let n = normalize_map(&m).unwrap();
        assert_eq!(n.values, arr2(&[[0.0, 0.25], [0.5, 1.0]]));
        assert!(n.normalized);
    }

    #[test]
    fn normalize_constant_map_collapses_to_zero() {
        let m = map(Array2::from_elem((2, 2), 3.0), false);
        let n = normalize_map(&m).unwrap();
        assert!(n.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let m = map(arr2(&[[0.0, 0.5], [0.75, 1.0]]), true);
        let n = normalize_map(&m).unwrap();
        assert_eq!(n.values, m.values);
    }

    #[test]
    fn normalize_rejects_negative() {
        let m = map(arr2(&[[-0.1, 0.5]]), false);
        assert!(normalize_map(&m).is_err());
    }

    #[test]
    fn normalize_scale_invariance() {
        let m = map(arr2(&[[0.1, 2.0], [0.4, 1.3]]), false);
        let n1 = normalize_map(&m).unwrap();
        for c in [0.5, 3.0, 1234.5] {
            let scaled = map(m.values.mapv(|v| v * c), false);
            let n2 = normalize_map(&scaled).unwrap();
            let max_err = (&n1.values - &n2.values)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_err <= 1e-6, "scale {c}: {max_err}");
        }
    }

    #[test]
    fn co_attention_single_map_is_identity() {
        let m = map(arr2(&[[1.0, 0.0], [0.25, 0.5]]), true);
        let co = co_attention(std::slice::from_ref(&m)).unwrap();
        assert_eq!(co.values, m.values);
    }

    #[test]
    fn co_attention_two_map_arithmetic() {
        let a = map(arr2(&[[1.0, 0.0], [0.0, 0.0]]), true);
        let b = map(arr2(&[[1.0, 1.0], [0.0, 0.0]]), true);
        let co = co_attention(&[a, b]).unwrap();
        assert_eq!(co.values, arr2(&[[1.0, 0.5], [0.0, 0.0]]));
    }

    #[test]
    fn co_attention_is_permutation_invariant() {
        let a = map(arr2(&[[0.2, 0.9], [0.0, 1.0]]), true);
        let b = map(arr2(&[[1.0, 0.1], [0.3, 0.0]]), true);
        let c = map(arr2(&[[0.5, 0.5], [1.0, 0.2]]), true);
        let co1 = co_attention(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let co2 = co_attention(&[c, a, b]).unwrap();
        assert_eq!(co1.values, co2.values);
    }

    #[test]
    fn co_attention_rejects_bad_inputs() {
        assert!(co_attention(&[]).is_err());
        let raw = map(arr2(&[[2.0]]), false);
        assert!(co_attention(&[raw]).is_err());
        let a = map(arr2(&[[1.0, 0.0]]), true);
        let b = map(arr2(&[[1.0], [0.0]]), true);
        assert!(co_attention(&[a, b]).is_err());
    }

    #[test]
    fn anti_attention_complement_and_involution() {
        let co = CoAttentionMap {
            values: arr2(&[[0.3]]),
        };
        let anti = anti_attention(&co).unwrap();
        assert_eq!(anti.values, arr2(&[[0.7]]));

        let zeros = CoAttentionMap {
            values: Array2::zeros((3, 3)),
        };
        let anti = anti_attention(&zeros).unwrap();
        assert!(anti.values.iter().all(|&v| v == 1.0));

        let co = CoAttentionMap {
            values: arr2(&[[0.25, 0.75], [1.0, 0.0]]),
        };
        let anti = anti_attention(&co).unwrap();
        let back = anti_attention(&CoAttentionMap { values: anti.values }).unwrap();
        assert_eq!(back.values, co.values);
    }

    #[test]
    fn anti_attention_rejects_out_of_range() {
        let co = CoAttentionMap {
            values: arr2(&[[1.5]]),
        };
        assert!(anti_attention(&co).is_err());
    }

    #[test]
    fn mass_fraction_cases() {
        let uniform = map(Array2::from_elem((4, 4), 1.0), true);
        let mut mask = Array2::from_elem((4, 4), false);
        for i in 0..2 {
            for j in 0..2 {
                mask[[i, j]] = true;
            }
        }
        assert!((attention_mass_fraction(&uniform, &mask).unwrap() - 0.25).abs() < 1e-12);

        let all = Array2::from_elem((4, 4), true);
        assert_eq!(attention_mass_fraction(&uniform, &all).unwrap(), 1.0);

        let mut outside = map(Array2::zeros((4, 4)), true);
        outside.values[[3, 3]] = 1.0;
        assert_eq!(attention_mass_fraction(&outside, &mask).unwrap(), 0.0);

        let zero = map(Array2::zeros((4, 4)), true);
        assert!(attention_mass_fraction(&zero, &mask).is_err());
    }

    #[test]
    fn upsample_map_contracts() {
        let m = map(arr2(&[[1.0, 0.0], [0.0, 0.0]]), true);
        // identity at same size
        let same = upsample_map(&m, 2, 2).unwrap();
        assert_eq!(same.values, m.values);
        // downscale rejected
        assert!(upsample_map(&m, 1, 2).is_err());
        // corner structure preserved: max-pool back the 8x8 upsample
        let up = upsample_map(&m, 8, 8).unwrap();
        let mut pooled = Array2::<f64>::zeros((2, 2));
        for i in 0..2 {
            for j in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for a in 0..4 {
                    for b in 0..4 {
                        best = best.max(up.values[[4 * i + a, 4 * j + b]]);
                    }
                }
                pooled[[i, j]] = best;
            }
        }
        assert!(pooled[[0, 0]] > pooled[[0, 1]]);
        assert!(pooled[[0, 0]] > pooled[[1, 0]]);
        assert!(pooled[[0, 0]] > pooled[[1, 1]]);
        // constant stays constant
        let c = map(Array2::from_elem((3, 3), 0.7), true);
        let upc = upsample_map(&c, 9, 11).unwrap();
        assert!(upc.values.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn fusion_monotonicity() {
        // increasing any input pointwise never decreases the pre-normalization mean.
        let a = map(arr2(&[[0.1, 0.4], [0.9, 0.0]]), true);
        let b = map(arr2(&[[0.6, 0.2], [0.3, 1.0]]), true);
        let mean = |x: &AttentionMap, y: &AttentionMap| (&x.values + &y.values) / 2.0;
        let before = mean(&a, &b);
        let mut bumped = a.clone();
        bumped.values[[0, 1]] = 0.9;
        let after = mean(&bumped, &b);
        assert!(after.iter().zip(before.iter()).all(|(x, y)| x >= y));
    }
}
