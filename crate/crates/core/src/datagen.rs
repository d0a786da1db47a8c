//! Synthetic multi-task dataset: colored shapes on low-frequency textured
//! backgrounds with aligned classification, detection and segmentation labels.
//!
//! Generation is pure per (spec, index): each sample derives its own RNG
//! stream, so datasets are deterministic and samples can be generated in
//! parallel. Images are CHW f64 in [0,1]; masks store `class_id + 1` with 0
//! reserved for background; boxes use exclusive max coordinates.

use crate::error::{CtaError, Result};
use crate::util;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Shape classes, id order fixed.
pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Scene parameters for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub num_shapes_min: usize,
    pub num_shapes_max: usize,
    /// Number of shape classes in play (prefix of [`CLASS_NAMES`]).
    pub num_classes: usize,
    /// Background texture family id.
    pub background: u32,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_shapes_min: 1,
            num_shapes_max: 3,
            num_classes: 4,
            background: 0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(CtaError::Config(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        if self.num_shapes_min < 1
            || self.num_shapes_min > self.num_shapes_max
            || self.num_shapes_max > 3
        {
            return Err(CtaError::Config(format!(
                "num_shapes range [{}, {}] must lie within [1, 3]",
                self.num_shapes_min, self.num_shapes_max
            )));
        }
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return Err(CtaError::Config(format!(
                "num_classes must be in [2, {}], got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Ground-truth box; `x_max`/`y_max` are exclusive, so area is width*height.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoxLabel {
    pub fn area(&self) -> u64 {
        u64::from(self.x_max - self.x_min) * u64::from(self.y_max - self.y_min)
    }
}

/// One image with aligned labels for all three tasks.
#[derive(Debug, Clone)]
pub struct MultiTaskSample {
    /// [3, H, W] in [0,1].
    pub image: Array3<f64>,
    /// Class of the largest box (ties to the lowest class id).
    pub class_label: usize,
    pub boxes: Vec<BoxLabel>,
    /// [H, W]; 0 = background, otherwise class_id + 1.
    pub mask: Array2<u8>,
}

impl MultiTaskSample {
    /// Binary foreground mask (any shape pixel).
    pub fn foreground(&self) -> Array2<bool> {
        self.mask.mapv(|v| v > 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct ShapeInstance {
    class_id: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

impl ShapeInstance {
    fn covers(&self, x: usize, y: usize) -> bool {
        // pixel centers
        let px = x as f64 + 0.5 - self.cx;
        let py = y as f64 + 0.5 - self.cy;
        match self.class_id {
            0 => px * px + py * py <= self.r * self.r,
            1 => px.abs() <= self.r * 0.9 && py.abs() <= self.r * 0.9,
            2 => {
                // upward triangle via three half-plane tests
                let (ax, ay) = (0.0, -self.r);
                let (bx, by) = (-self.r, self.r * 0.85);
                let (cx2, cy2) = (self.r, self.r * 0.85);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx2, cy2);
                let d3 = sign(cx2, cy2, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            3 => {
                let arm = self.r * 0.36;
                (px.abs() <= arm && py.abs() <= self.r)
                    || (py.abs() <= arm && px.abs() <= self.r)
            }
            _ => unreachable!("class id validated by SceneSpec"),
        }
    }

    fn bbox_iou(&self, other: &ShapeInstance) -> f64 {
        let (ax0, ax1) = (self.cx - self.r, self.cx + self.r);
        let (ay0, ay1) = (self.cy - self.r, self.cy + self.r);
        let (bx0, bx1) = (other.cx - other.r, other.cx + other.r);
        let (by0, by1) = (other.cy - other.r, other.cy + other.r);
        let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = ix * iy;
        let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
        inter / union
    }
}

fn background_texture(rng: &mut ChaCha12Rng, size: usize, family: u32) -> Array3<f64> {
    // per-family base palettes, all mid-brightness so shapes can contrast
    let base: [f64; 3] = match family % 3 {
        0 => [0.45, 0.48, 0.55],
        1 => [0.55, 0.47, 0.40],
        _ => [0.42, 0.52, 0.44],
    };
    let mut img = Array3::<f64>::zeros((3, size, size));
    for c in 0..3 {
        // a few low-frequency plane waves keep unimportant regions smooth
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx: f64 = rng.random_range(-2.5..2.5);
                let fy: f64 = rng.random_range(-2.5..2.5);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let amp: f64 = rng.random_range(0.04..0.11);
                (fx, fy, phase, amp)
            })
            .collect();
        let jitter: f64 = rng.random_range(-0.05..0.05);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                let mut val = base[c] + jitter;
                for &(fx, fy, phase, amp) in &waves {
                    val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos();
                }
                img[[c, y, x]] = val.clamp(0.05, 0.95);
            }
        }
    }
    img
}

fn shape_color(rng: &mut ChaCha12Rng, bg_mean: f64) -> [f64; 3] {
    // push shape brightness away from the background for visible objects
    let (lo, hi) = if bg_mean > 0.5 { (0.02, 0.38) } else { (0.62, 0.98) };
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Deterministic per-(spec, index) sample generation.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<MultiTaskSample> {
    spec.validate()?;
    let seed = util::stage_seed(spec.rng_seed, &format!("sample/{index}"));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = spec.image_size;

    let mut image = background_texture(&mut rng, size, spec.background);
    let bg_mean = image.sum() / image.len() as f64;

    let n_shapes = rng.random_range(spec.num_shapes_min..=spec.num_shapes_max);

    let mut placed: Vec<ShapeInstance> = Vec::new();
    for shape_idx in 0..n_shapes {
        // the first shape is distinctly larger than any distractor so the
        // class label (largest box) is visually unambiguous
        let (r_lo, r_hi) = if shape_idx == 0 {
            (size as f64 / 5.0, size as f64 / 4.0)
        } else {
            (size as f64 / 10.0, size as f64 / 7.0)
        };
        let mut accepted = None;
        for attempt in 0..200 {
            // shrink allowed radius if placement keeps colliding
            let hi = if attempt < 100 { r_hi } else { (r_lo + r_hi) / 2.0 };
            let r = rng.random_range(r_lo..hi);
            let margin = r + 2.0;
            let cx = rng.random_range(margin..size as f64 - margin);
            let cy = rng.random_range(margin..size as f64 - margin);
            let class_id = rng.random_range(0..spec.num_classes);
            let cand = ShapeInstance { class_id, cx, cy, r };
            if placed.iter().all(|p| cand.bbox_iou(p) < 0.2) {
                accepted = Some(cand);
                break;
            }
        }
        if let Some(shape) = accepted {
            placed.push(shape);
        }
        // an unplaceable shape is dropped; at most 3 shapes fit comfortably
    }

    // painter's order: later shapes overdraw earlier ones
    let mut mask = Array2::<u8>::zeros((size, size));
    let mut owner = Array2::<i32>::from_elem((size, size), -1);
    for (si, shape) in placed.iter().enumerate() {
        let color = shape_color(&mut rng, bg_mean);
        for y in 0..size {
            for x in 0..size {
                if shape.covers(x, y) {
                    for c in 0..3 {
                        image[[c, y, x]] = color[c];
                    }
                    mask[[y, x]] = shape.class_id as u8 + 1;
                    owner[[y, x]] = si as i32;
                }
            }
        }
    }

    // tight boxes over each instance's visible pixels
    let mut boxes = Vec::new();
    for (si, shape) in placed.iter().enumerate() {
        let mut lo = (u32::MAX, u32::MAX);
        let mut hi = (0u32, 0u32);
        let mut any = false;
        for y in 0..size {
            for x in 0..size {
                if owner[[y, x]] == si as i32 {
                    any = true;
                    lo.0 = lo.0.min(x as u32);
                    lo.1 = lo.1.min(y as u32);
                    hi.0 = hi.0.max(x as u32);
                    hi.1 = hi.1.max(y as u32);
                }
            }
        }
        if any {
            boxes.push(BoxLabel {
                class_id: shape.class_id,
                x_min: lo.0,
                y_min: lo.1,
                x_max: hi.0 + 1,
                y_max: hi.1 + 1,
            });
        }
    }
    if boxes.is_empty() {
        return Err(CtaError::Training(format!(
            "sample {index}: no shape could be placed"
        )));
    }

    // class of the largest box; ties break to the lowest class id
    let class_label = boxes
        .iter()
        .map(|b| (b.area(), b.class_id))
        .fold((0u64, usize::MAX), |(best_a, best_c), (a, c)| {
            if a > best_a || (a == best_a && c < best_c) {
                (a, c)
            } else {
                (best_a, best_c)
            }
        })
        .1;

    Ok(MultiTaskSample {
        image,
        class_label,
        boxes,
        mask,
    })
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub file: String,
    pub split: String,
    pub class: usize,
    pub boxes: Vec<BoxLabel>,
    pub mask_file: String,
}

/// Dataset on disk: manifest plus its root directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn count(&self, split: &str) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

/// Convert a CHW [0,1] image to 8-bit RGB rows.
pub fn image_to_rgb8(image: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Inverse of [`image_to_rgb8`] up to 8-bit quantization.
pub fn rgb8_to_image(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

fn save_png_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        util::create_dir_all(parent)?;
    }
    image_to_rgb8(image).save(path).map_err(CtaError::from)
}

fn save_png_gray(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]]])
    });
    img.save(path).map_err(CtaError::from)
}

fn load_png_rgb(path: &Path) -> Result<Array3<f64>> {
    if !path.exists() {
        return Err(CtaError::MissingArtifact(path.display().to_string()));
    }
    let img = image::open(path)?.to_rgb8();
    Ok(rgb8_to_image(&img))
}

fn load_png_gray(path: &Path) -> Result<Array2<u8>> {
    if !path.exists() {
        return Err(CtaError::MissingArtifact(path.display().to_string()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Generate train and test splits (disjoint index ranges) under `out_dir`.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(CtaError::Config(
            "n_train and n_test must be positive".into(),
        ));
    }
    util::create_dir_all(out_dir)?;

    use rayon::prelude::*;
    let total = n_train + n_test;
    let samples: Vec<(u64, MultiTaskSample)> = (0..total as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, i).map(|s| (i, s)))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(total);
    for (i, sample) in &samples {
        let split = if (*i as usize) < n_train { "train" } else { "test" };
        let file = format!("img_{i:05}.png");
        let mask_file = format!("mask_{i:05}.png");
        save_png_rgb(&out_dir.join(&file), &sample.image)?;
        save_png_gray(&out_dir.join(&mask_file), &sample.mask)?;
        records.push(ManifestRecord {
            file,
            split: split.to_string(),
            class: sample.class_label,
            boxes: sample.boxes.clone(),
            mask_file,
        });
    }
    util::write_jsonl(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    })
}

/// Load a dataset written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(CtaError::MissingArtifact(format!(
            "dataset manifest {}",
            manifest_path.display()
        )));
    }
    let records: Vec<ManifestRecord> = util::read_jsonl(&manifest_path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in &records {
        let image = load_png_rgb(&dir.join(&r.file))?;
        let mask = load_png_gray(&dir.join(&r.mask_file))?;
        let sample = MultiTaskSample {
            image,
            class_label: r.class,
            boxes: r.boxes.clone(),
            mask,
        };
        match r.split.as_str() {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => {
                return Err(CtaError::InvalidInput(format!(
                    "unknown split '{other}' in manifest"
                )))
            }
        }
    }
    Ok(LoadedDataset { train, test })
}

/// In-memory dataset splits.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Vec<MultiTaskSample>,
    pub test: Vec<MultiTaskSample>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            rng_seed: seed,
            ..SceneSpec::default()
        }
    }

    fn check_invariants(s: &MultiTaskSample, spec: &SceneSpec) {
        let size = spec.image_size;
        assert_eq!(s.image.dim(), (3, size, size));
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!s.boxes.is_empty() && s.boxes.len() <= spec.num_shapes_max);

        for b in &s.boxes {
            assert!(b.x_min < b.x_max && b.x_max <= size as u32);
            assert!(b.y_min < b.y_max && b.y_max <= size as u32);
            // each box holds at least one mask pixel of its class
            let mut found = false;
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    if s.mask[[y as usize, x as usize]] == b.class_id as u8 + 1 {
                        found = true;
                    }
                }
            }
            assert!(found, "box without matching mask pixels");
        }

        // every foreground mask pixel lies inside the union of the boxes
        for y in 0..size {
            for x in 0..size {
                if s.mask[[y, x]] > 0 {
                    let inside = s.boxes.iter().any(|b| {
                        (x as u32) >= b.x_min
                            && (x as u32) < b.x_max
                            && (y as u32) >= b.y_min
                            && (y as u32) < b.y_max
                    });
                    assert!(inside, "mask pixel outside all boxes at ({x},{y})");
                }
            }
        }

        // class label equals the largest-area box class, ties to lowest id
        let best = s
            .boxes
            .iter()
            .map(|b| (b.area(), b.class_id))
            .fold((0, usize::MAX), |(ba, bc), (a, c)| {
                if a > ba || (a == ba && c < bc) {
                    (a, c)
                } else {
                    (ba, bc)
                }
            });
        assert_eq!(s.class_label, best.1);
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(7);
        let a = generate_sample(&sp, 0).unwrap();
        let b = generate_sample(&sp, 0).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.class_label, b.class_label);

        let c = generate_sample(&sp, 1).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invariants_hold_over_many_samples() {
        let sp = spec(3);
        for i in 0..40 {
            let s = generate_sample(&sp, i).unwrap();
            check_invariants(&s, &sp);
        }
    }

    #[test]
    fn single_shape_spec_yields_single_box() {
        let sp = SceneSpec {
            num_shapes_min: 1,
            num_shapes_max: 1,
            rng_seed: 11,
            ..SceneSpec::default()
        };
        for i in 0..10 {
            let s = generate_sample(&sp, i).unwrap();
            assert_eq!(s.boxes.len(), 1);
            assert_eq!(s.class_label, s.boxes[0].class_id);
        }
    }

    #[test]
    fn all_shape_classes_do_appear() {
        let sp = spec(5);
        let mut seen = [false; 4];
        for i in 0..60 {
            let s = generate_sample(&sp, i).unwrap();
            for b in &s.boxes {
                seen[b.class_id] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "seen = {seen:?}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut sp = spec(0);
        sp.image_size = 16;
        assert!(sp.validate().is_err());
        let mut sp = spec(0);
        sp.num_classes = 1;
        assert!(sp.validate().is_err());
        let mut sp = spec(0);
        sp.num_shapes_min = 0;
        assert!(sp.validate().is_err());
        let mut sp = spec(0);
        sp.num_shapes_max = 7;
        assert!(sp.validate().is_err());
    }

    #[test]
    fn dataset_roundtrip_and_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let sp = spec(9);
        let manifest = generate_dataset(&sp, 6, 3, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 9);
        assert_eq!(manifest.count("train"), 6);
        assert_eq!(manifest.count("test"), 3);

        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), 6);
        assert_eq!(loaded.test.len(), 3);

        // labels exact, images within png quantization
        for (i, s) in loaded.train.iter().enumerate() {
            let orig = generate_sample(&sp, i as u64).unwrap();
            assert_eq!(s.class_label, orig.class_label);
            assert_eq!(s.boxes, orig.boxes);
            assert_eq!(s.mask, orig.mask);
            let max_err = (&s.image - &orig.image)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_err <= 1.0 / 255.0, "png roundtrip error {max_err}");
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let sp = spec(21);
        generate_dataset(&sp, 3, 2, dir1.path()).unwrap();
        generate_dataset(&sp, 3, 2, dir2.path()).unwrap();
        for name in ["manifest.jsonl", "img_00000.png", "mask_00004.png"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn smallest_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let sp = spec(2);
        generate_dataset(&sp, 1, 1, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), 1);
        assert_eq!(loaded.test.len(), 1);
        check_invariants(&loaded.train[0], &sp);
    }
}
