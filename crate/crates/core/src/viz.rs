//! Heatmap export and overlay rendering.
//!
//! Attention maps go out as 8-bit grayscale PNGs (value = round(255*v)) or as
//! jet-colormap overlays alpha-blended onto the image at 0.5.

use crate::attention::AttentionMap;
use crate::datagen::image_to_rgb8;
use crate::error::{CtaError, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Piecewise-linear jet colormap on [0,1].
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Save a [0,1] map as an 8-bit grayscale PNG.
pub fn save_heatmap_gray(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    if let Some(parent) = path.parent() {
        crate::util::create_dir_all(parent)?;
    }
    img.save(path).map_err(CtaError::from)
}

/// Jet-colormapped heatmap alpha-blended over an image at 0.5.
pub fn overlay_heatmap(image: &Array3<f64>, map: &Array2<f64>) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    if map.dim() != (h, w) {
        return Err(CtaError::InvalidInput(format!(
            "overlay: map {:?} does not match image {}x{}",
            map.dim(),
            h,
            w
        )));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let color = jet(map[[y, x]]);
            for c in 0..3 {
                out[[c, y, x]] = 0.5 * image[[c, y, x]] + 0.5 * color[c];
            }
        }
    }
    Ok(out)
}

/// Horizontal strip of equally sized panels with a thin white gutter.
pub fn hstack(panels: &[Array3<f64>], gutter: usize) -> Result<Array3<f64>> {
    let first = panels
        .first()
        .ok_or_else(|| CtaError::InvalidInput("hstack needs at least one panel".into()))?;
    let (c, h, w) = first.dim();
    for p in panels {
        if p.dim() != (c, h, w) {
            return Err(CtaError::InvalidInput(
                "hstack panels must share one shape".into(),
            ));
        }
    }
    let total_w = w * panels.len() + gutter * (panels.len() - 1);
    let mut out = Array3::from_elem((c, h, total_w), 1.0);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + gutter);
        out.slice_mut(ndarray::s![.., .., x0..x0 + w]).assign(p);
    }
    Ok(out)
}

pub fn save_image(path: &Path, image: &Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        crate::util::create_dir_all(parent)?;
    }
    image_to_rgb8(image).save(path).map_err(CtaError::from)
}

/// Convenience: grayscale export of an [`AttentionMap`].
pub fn save_attention_png(path: &Path, map: &AttentionMap) -> Result<()> {
    save_heatmap_gray(path, &map.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        let cold = jet(0.0);
        assert!(cold[2] > 0.0 && cold[0] == 0.0, "low values map to blue");
        let hot = jet(1.0);
        assert!(hot[0] > 0.0 && hot[2] == 0.0, "high values map to red");
        let mid = jet(0.5);
        assert!(mid[1] > mid[0] && mid[1] > mid[2], "mid values map to green");
    }

    #[test]
    fn overlay_shape_checks() {
        let img = Array3::from_elem((3, 4, 4), 0.2);
        let map = Array2::from_elem((4, 4), 0.5);
        let out = overlay_heatmap(&img, &map).unwrap();
        assert_eq!(out.dim(), (3, 4, 4));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bad = Array2::from_elem((2, 4), 0.5);
        assert!(overlay_heatmap(&img, &bad).is_err());
    }

    #[test]
    fn hstack_layout() {
        let a = Array3::from_elem((3, 4, 4), 0.0);
        let b = Array3::from_elem((3, 4, 4), 1.0);
        let out = hstack(&[a, b], 2).unwrap();
        assert_eq!(out.dim(), (3, 4, 10));
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 5]], 1.0); // gutter
        assert_eq!(out[[0, 0, 6]], 1.0);
    }

    #[test]
    fn heatmap_png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = Array2::from_shape_fn((5, 5), |(i, j)| (i as f64 * 5.0 + j as f64) / 24.0);
        save_heatmap_gray(&path, &map).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (5, 5));
        assert_eq!(img.get_pixel(4, 4)[0], 255);
        assert_eq!(img.get_pixel(0, 0)[0], 0);
    }
}
