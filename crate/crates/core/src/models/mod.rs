//! Task models: a grid-head detector, an encoder-decoder segmenter and a
//! conv classifier that doubles (with frozen weights) as the feature
//! extractor used to read out adversarial attention.
//!
//! Every model exposes a feature tap — the post-activation output of its
//! last trunk convolution — and a scalar, class-discriminative task score
//! whose gradient w.r.t. the tap drives Grad-CAM.

mod classifier;
mod detector;
mod segmenter;
pub mod train;

pub use classifier::{Classifier, ClsForward, CLS_ARCH_ID, CLS_TAP_ID};
pub use detector::{DetForward, DetOutputs, Detector, DET_ARCH_ID, DET_TAP_ID};
pub use segmenter::{SegForward, Segmenter, SEG_ARCH_ID, SEG_TAP_ID};

use crate::error::{CtaError, Result};
use crate::nn::{self, ParamModel};
use crate::tensor::{Graph, ValueId};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// The three vision tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cls,
    Det,
    Seg,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Cls => write!(f, "cls"),
            TaskKind::Det => write!(f, "det"),
            TaskKind::Seg => write!(f, "seg"),
        }
    }
}

/// Identifies the tapped layer and its output shape (channels, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureTap {
    pub layer_id: String,
    pub feature_shape: (usize, usize, usize),
}

/// Scalar differentiable task score and the class that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    pub value: f64,
    pub class_id: usize,
}

/// Task-head outputs as plain arrays.
#[derive(Debug, Clone)]
pub enum TaskOutputs {
    Cls(Array1<f64>),
    Det(DetOutputs),
    Seg(Array3<f64>),
}

/// Default objectness threshold for the detection score.
pub const TAU_DET: f64 = 0.5;

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scalar task score from head outputs.
///
/// cls: the argmax-class logit. seg: the per-pixel argmax logit summed over
/// pixels. det: objectness-weighted argmax class logit summed over cells with
/// objectness above `tau_det`, falling back to the single highest-objectness
/// cell when none pass.
pub fn task_scalar_score(task: TaskKind, outputs: &TaskOutputs, tau_det: f64) -> Result<TaskScore> {
    match (task, outputs) {
        (TaskKind::Cls, TaskOutputs::Cls(logits)) => {
            let slice = logits.as_slice().expect("logits contiguous");
            let c = argmax(slice);
            Ok(TaskScore {
                value: slice[c],
                class_id: c,
            })
        }
        (TaskKind::Seg, TaskOutputs::Seg(logits)) => {
            let (classes, h, w) = logits.dim();
            let mut value = 0.0;
            let mut counts = vec![0usize; classes];
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0;
                    for k in 1..classes {
                        if logits[[k, i, j]] > logits[[best, i, j]] {
                            best = k;
                        }
                    }
                    value += logits[[best, i, j]];
                    counts[best] += 1;
                }
            }
            Ok(TaskScore {
                value,
                class_id: argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()),
            })
        }
        (TaskKind::Det, TaskOutputs::Det(out)) => {
            let (s1, s2) = out.obj.dim();
            let mut value = 0.0;
            let mut any = false;
            let mut best_cell = (0usize, 0usize);
            for i in 0..s1 {
                for j in 0..s2 {
                    let p = sigmoid(out.obj[[i, j]]);
                    if p > sigmoid(out.obj[[best_cell.0, best_cell.1]]) {
                        best_cell = (i, j);
                    }
                    if p > tau_det {
                        any = true;
                        value += p * cell_max_class_logit(&out.classes, i, j);
                    }
                }
            }
            if !any {
                let (i, j) = best_cell;
                value = sigmoid(out.obj[[i, j]]) * cell_max_class_logit(&out.classes, i, j);
            }
            let (bi, bj) = best_cell;
            let c = {
                let classes = out.classes.dim().0;
                let mut best = 0;
                for k in 1..classes {
                    if out.classes[[k, bi, bj]] > out.classes[[best, bi, bj]] {
                        best = k;
                    }
                }
                best
            };
            Ok(TaskScore {
                value,
                class_id: c,
            })
        }
        (task, outputs) => Err(CtaError::InvalidInput(format!(
            "task_scalar_score: task {task} does not match outputs {}",
            match outputs {
                TaskOutputs::Cls(_) => "cls",
                TaskOutputs::Det(_) => "det",
                TaskOutputs::Seg(_) => "seg",
            }
        ))),
    }
}

fn cell_max_class_logit(classes: &Array3<f64>, i: usize, j: usize) -> f64 {
    let c = classes.dim().0;
    let mut best = classes[[0, i, j]];
    for k in 1..c {
        best = best.max(classes[[k, i, j]]);
    }
    best
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Graph-side classification score; returns the score node and chosen class.
pub fn cls_score_node(g: &mut Graph, logits: ValueId) -> (ValueId, usize) {
    let values: Vec<f64> = g.value(logits).iter().copied().collect();
    let c = argmax(&values);
    (g.index(logits, c), c)
}

/// Graph-side segmentation score (sum of per-pixel argmax logits).
pub fn seg_score_node(g: &mut Graph, logits: ValueId) -> ValueId {
    let sel = g.select_argmax_channels(logits);
    g.sum_all(sel)
}

/// Graph-side detection score matching [`task_scalar_score`].
pub fn det_score_node(g: &mut Graph, obj: ValueId, classes: ValueId, tau_det: f64) -> ValueId {
    let obj_map = g.channel_weighted_sum(obj, Array1::from_vec(vec![1.0]));
    let obj_prob = g.sigmoid(obj_map);
    let cls_max = g.select_argmax_channels(classes);
    let prod = g.mul(obj_prob, cls_max);

    let probs = g
        .value(obj_prob)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("objectness map is 2-D")
        .to_owned();
    let mut mask = probs.mapv(|p| if p > tau_det { 1.0 } else { 0.0 });
    if mask.sum() == 0.0 {
        let mut best = (0usize, 0usize);
        for i in 0..probs.dim().0 {
            for j in 0..probs.dim().1 {
                if probs[[i, j]] > probs[best] {
                    best = (i, j);
                }
            }
        }
        mask[best] = 1.0;
    }
    let masked = g.mul_const(prod, mask.into_dyn());
    g.sum_all(masked)
}

/// Checkpoint metadata; the stable cross-version contract for a model dir.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub task: String,
    pub architecture_id: String,
    pub tap_layer_id: String,
    pub train_seed: u64,
    pub clean_metrics: BTreeMap<String, f64>,
    pub num_classes: usize,
    pub image_size: usize,
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "model.json";

/// Write a model checkpoint directory (weights blob + metadata).
pub fn save_model(dir: &Path, model: &impl ParamModel, meta: &ModelMeta) -> Result<()> {
    crate::util::create_dir_all(dir)?;
    nn::save_weights(model, &dir.join(WEIGHTS_FILE))?;
    let json = serde_json::to_string_pretty(meta)?;
    crate::util::write_bytes(&dir.join(META_FILE), json.as_bytes())
}

pub fn load_meta(dir: &Path) -> Result<ModelMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(CtaError::MissingArtifact(format!(
            "model metadata {}",
            path.display()
        )));
    }
    Ok(serde_json::from_str(&crate::util::read_string(&path)?)?)
}

fn check_arch(meta: &ModelMeta, expect: &str) -> Result<()> {
    if meta.architecture_id != expect {
        return Err(CtaError::InvalidInput(format!(
            "checkpoint architecture '{}' does not match '{expect}'",
            meta.architecture_id
        )));
    }
    Ok(())
}

pub fn load_classifier(dir: &Path) -> Result<(Classifier, ModelMeta)> {
    let meta = load_meta(dir)?;
    check_arch(&meta, classifier::CLS_ARCH_ID)?;
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut model = Classifier::new(&mut rng, meta.image_size, meta.num_classes);
    nn::load_weights(&mut model, &dir.join(WEIGHTS_FILE))?;
    Ok((model, meta))
}

pub fn load_detector(dir: &Path) -> Result<(Detector, ModelMeta)> {
    let meta = load_meta(dir)?;
    check_arch(&meta, detector::DET_ARCH_ID)?;
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut model = Detector::new(&mut rng, meta.image_size, meta.num_classes);
    nn::load_weights(&mut model, &dir.join(WEIGHTS_FILE))?;
    Ok((model, meta))
}

pub fn load_segmenter(dir: &Path) -> Result<(Segmenter, ModelMeta)> {
    let meta = load_meta(dir)?;
    check_arch(&meta, segmenter::SEG_ARCH_ID)?;
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let mut model = Segmenter::new(&mut rng, meta.image_size, meta.num_classes);
    nn::load_weights(&mut model, &dir.join(WEIGHTS_FILE))?;
    Ok((model, meta))
}

/// Validate an image tensor: [3, H, W] with values in [0,1].
pub fn check_image(image: &Array3<f64>, image_size: usize) -> Result<()> {
    if image.dim() != (3, image_size, image_size) {
        return Err(CtaError::InvalidInput(format!(
            "expected image [3, {image_size}, {image_size}], got {:?}",
            image.dim()
        )));
    }
    if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CtaError::InvalidInput(
            "image values must lie in [0,1]".into(),
        ));
    }
    Ok(())
}

/// The frozen model collection used by attack training and evaluation.
pub struct TaskModelBundle {
    pub classifier: Classifier,
    pub detector: Detector,
    pub segmenter: Segmenter,
    extractor: Classifier,
    pub image_size: usize,
    pub num_classes: usize,
}

impl TaskModelBundle {
    /// The extractor is the trained classifier with its weights frozen at
    /// construction time.
    pub fn new(classifier: Classifier, detector: Detector, segmenter: Segmenter) -> Self {
        let image_size = classifier.image_size;
        let num_classes = classifier.num_classes;
        let extractor = classifier.clone();
        TaskModelBundle {
            classifier,
            detector,
            segmenter,
            extractor,
            image_size,
            num_classes,
        }
    }

    pub fn extractor(&self) -> &Classifier {
        &self.extractor
    }

    /// SHA-256 of each model's weights, keyed by role.
    pub fn weight_hashes(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("classifier".into(), nn::weights_hash(&self.classifier));
        map.insert("detector".into(), nn::weights_hash(&self.detector));
        map.insert("segmenter".into(), nn::weights_hash(&self.segmenter));
        map.insert("extractor_d".into(), nn::weights_hash(&self.extractor));
        map
    }

    pub fn taps(&self) -> BTreeMap<String, FeatureTap> {
        let mut map = BTreeMap::new();
        map.insert("classifier".into(), self.classifier.tap());
        map.insert("detector".into(), self.detector.tap());
        map.insert("segmenter".into(), self.segmenter.tap());
        map.insert("extractor_d".into(), self.extractor.tap());
        map
    }
}

/// Per-task forward returning head outputs plus tap features, as arrays.
pub fn forward_with_features(
    task: TaskKind,
    bundle: &TaskModelBundle,
    image: &Array3<f64>,
) -> Result<(TaskOutputs, Array3<f64>)> {
    check_image(image, bundle.image_size)?;
    match task {
        TaskKind::Cls => {
            let (logits, tap) = bundle.classifier.forward_arrays(image);
            Ok((TaskOutputs::Cls(logits), tap))
        }
        TaskKind::Det => {
            let (out, tap) = bundle.detector.forward_arrays(image);
            Ok((TaskOutputs::Det(out), tap))
        }
        TaskKind::Seg => {
            let (logits, tap) = bundle.segmenter.forward_arrays(image);
            Ok((TaskOutputs::Seg(logits), tap))
        }
    }
}

/// Gradient of a model's task score w.r.t. its tap features, on clean inputs.
/// This is the Grad-CAM input pair (features, d score / d features).
pub fn tap_features_and_grads(
    task: TaskKind,
    bundle: &TaskModelBundle,
    image: &Array3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_image(image, bundle.image_size)?;
    let mut g = Graph::new();
    let x = g.leaf_with_grad(image.clone().into_dyn());
    let (tap, score) = match task {
        TaskKind::Cls => {
            let fwd = bundle.classifier.forward(&mut g, x, false);
            let (score, _) = cls_score_node(&mut g, fwd.logits);
            (fwd.tap, score)
        }
        TaskKind::Det => {
            let fwd = bundle.detector.forward(&mut g, x, false);
            let score = det_score_node(&mut g, fwd.obj, fwd.classes, TAU_DET);
            (fwd.tap, score)
        }
        TaskKind::Seg => {
            let fwd = bundle.segmenter.forward(&mut g, x, false);
            let score = seg_score_node(&mut g, fwd.logits);
            (fwd.tap, score)
        }
    };
    let grads = g.backward(score);
    let features = g
        .value(tap)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("tap is CHW");
    let tap_grad = grads
        .get_or_zeros(&g, tap)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("tap grad is CHW");
    Ok((features, tap_grad))
}

/// Argmax class prediction.
pub fn predict_class(model: &Classifier, image: &Array3<f64>) -> Result<usize> {
    check_image(image, model.image_size)?;
    let (logits, _) = model.forward_arrays(image);
    Ok(argmax(logits.as_slice().expect("logits contiguous")))
}

/// Per-pixel argmax mask (ties to the lowest class id).
pub fn predict_mask(model: &Segmenter, image: &Array3<f64>) -> Result<Array2<u8>> {
    check_image(image, model.image_size)?;
    let (logits, _) = model.forward_arrays(image);
    let (classes, h, w) = logits.dim();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        for k in 1..classes {
            if logits[[k, i, j]] > logits[[best, i, j]] {
                best = k;
            }
        }
        best as u8
    }))
}

/// Decoded, confidence-thresholded, per-class NMS detections.
pub fn predict_boxes(
    model: &Detector,
    image: &Array3<f64>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<crate::metrics::DetPred>> {
    check_image(image, model.image_size)?;
    let (out, _) = model.forward_arrays(image);
    Ok(model.decode(&out, conf_threshold, nms_iou))
}

/// Scalar task score evaluated in-graph; used to cross-check the array path.
#[cfg(test)]
pub(crate) fn graph_score_value(
    task: TaskKind,
    bundle: &TaskModelBundle,
    image: &Array3<f64>,
) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(image.clone().into_dyn());
    let score = match task {
        TaskKind::Cls => {
            let fwd = bundle.classifier.forward(&mut g, x, false);
            cls_score_node(&mut g, fwd.logits).0
        }
        TaskKind::Det => {
            let fwd = bundle.detector.forward(&mut g, x, false);
            det_score_node(&mut g, fwd.obj, fwd.classes, TAU_DET)
        }
        TaskKind::Seg => {
            let fwd = bundle.segmenter.forward(&mut g, x, false);
            seg_score_node(&mut g, fwd.logits)
        }
    };
    crate::tensor::scalar_value(g.value(score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_bundle(seed: u64) -> TaskModelBundle {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TaskModelBundle::new(
            Classifier::new(&mut rng, 64, 4),
            Detector::new(&mut rng, 64, 4),
            Segmenter::new(&mut rng, 64, 4),
        )
    }

    fn test_image(seed: u64) -> Array3<f64> {
        crate::datagen::generate_sample(
            &crate::datagen::SceneSpec {
                rng_seed: seed,
                ..Default::default()
            },
            0,
        )
        .unwrap()
        .image
    }

    #[test]
    fn cls_score_trivial_example() {
        let logits = Array1::from_vec(vec![2.0, 5.0, 1.0, 0.5]);
        let score = task_scalar_score(TaskKind::Cls, &TaskOutputs::Cls(logits), TAU_DET).unwrap();
        assert_eq!(score.value, 5.0);
        assert_eq!(score.class_id, 1);
    }

    #[test]
    fn seg_score_uniform_argmax_example() {
        // every pixel's argmax logit is 1.0 on an 8x8 map -> 64.0
        let mut logits = Array3::<f64>::zeros((3, 8, 8));
        logits.index_axis_mut(ndarray::Axis(0), 1).fill(1.0);
        let score = task_scalar_score(TaskKind::Seg, &TaskOutputs::Seg(logits), TAU_DET).unwrap();
        assert!((score.value - 64.0).abs() < 1e-12);
    }

    #[test]
    fn det_score_fallback_rule() {
        // all objectness below tau -> only the max-objectness cell counts
        let obj = ndarray::arr2(&[[-3.0, -1.0], [-2.0, -5.0]]);
        let classes = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| {
            (c as f64) + 0.1 * (i as f64) - 0.2 * (j as f64)
        });
        let out = DetOutputs {
            obj: obj.clone(),
            boxes: Array3::zeros((4, 2, 2)),
            classes: classes.clone(),
        };
        let score = task_scalar_score(TaskKind::Det, &TaskOutputs::Det(out), 0.5).unwrap();
        // max objectness at (0,1); argmax class logit there is c=1: 1.0 + 0.0 - 0.2
        let expect = sigmoid(-1.0) * (1.0 + 0.1 * 0.0 - 0.2);
        assert!((score.value - expect).abs() < 1e-12);
    }

    #[test]
    fn mismatched_task_and_outputs_error() {
        let logits = Array1::from_vec(vec![1.0, 2.0]);
        assert!(task_scalar_score(TaskKind::Seg, &TaskOutputs::Cls(logits), TAU_DET).is_err());
    }

    #[test]
    fn graph_and_array_scores_agree() {
        let bundle = tiny_bundle(3);
        let image = test_image(5);
        for task in [TaskKind::Cls, TaskKind::Det, TaskKind::Seg] {
            let (outputs, _) = forward_with_features(task, &bundle, &image).unwrap();
            let array_score = task_scalar_score(task, &outputs, TAU_DET).unwrap();
            let graph_score = graph_score_value(task, &bundle, &image);
            assert!(
                (array_score.value - graph_score).abs() < 1e-9,
                "{task}: array {} vs graph {graph_score}",
                array_score.value
            );
        }
    }

    #[test]
    fn forward_features_match_tap_shape_and_are_pure() {
        let bundle = tiny_bundle(7);
        let image = test_image(9);
        for task in [TaskKind::Cls, TaskKind::Det, TaskKind::Seg] {
            let (_, f1) = forward_with_features(task, &bundle, &image).unwrap();
            let (_, f2) = forward_with_features(task, &bundle, &image).unwrap();
            assert_eq!(f1, f2, "{task}: repeated forward passes must be identical");
            let tap = match task {
                TaskKind::Cls => bundle.classifier.tap(),
                TaskKind::Det => bundle.detector.tap(),
                TaskKind::Seg => bundle.segmenter.tap(),
            };
            assert_eq!(f1.dim(), tap.feature_shape, "{task}: tap shape contract");
            assert!(tap.feature_shape.1 >= 4 && tap.feature_shape.2 >= 4);
        }
    }

    #[test]
    fn score_gradients_are_finite_for_all_tasks() {
        let bundle = tiny_bundle(11);
        let image = test_image(13);
        for task in [TaskKind::Cls, TaskKind::Det, TaskKind::Seg] {
            let (features, grads) = tap_features_and_grads(task, &bundle, &image).unwrap();
            assert!(features.iter().all(|v| v.is_finite()));
            assert!(grads.iter().all(|v| v.is_finite()), "{task}: non-finite grads");
            let norm: f64 = grads.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{task}: gradient identically zero");
        }
    }

    #[test]
    fn bad_image_shape_rejected() {
        let bundle = tiny_bundle(1);
        let image = Array3::<f64>::zeros((3, 32, 32));
        assert!(forward_with_features(TaskKind::Cls, &bundle, &image).is_err());
        let image = Array3::<f64>::from_elem((3, 64, 64), 1.5);
        assert!(forward_with_features(TaskKind::Cls, &bundle, &image).is_err());
    }

    #[test]
    fn extractor_matches_classifier_at_construction() {
        let bundle = tiny_bundle(17);
        assert_eq!(
            nn::weights_hash(&bundle.classifier),
            nn::weights_hash(bundle.extractor())
        );
    }

    #[test]
    fn predict_tie_break_rules() {
        // per-pixel tie -> lowest class id
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut seg = Segmenter::new(&mut rng, 64, 4);
        for p in seg.params_mut() {
            p.value.fill(0.0);
        }
        let image = test_image(2);
        let mask = predict_mask(&seg, &image).unwrap();
        assert!(mask.iter().all(|&v| v == 0));
    }
}
