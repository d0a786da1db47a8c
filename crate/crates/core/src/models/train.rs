//! Supervised training for the three task models, with clean-quality gates.
//!
//! Batches are processed as independent per-image tapes (parallelized) whose
//! gradients are summed in index order, so training is deterministic per
//! seed regardless of thread scheduling.

use super::{Classifier, Detector, Segmenter};
use crate::datagen::MultiTaskSample;
use crate::error::{CtaError, Result};
use crate::metrics;
use crate::nn::{sum_grads, Adam, ParamModel};
use crate::tensor::{scalar_value, Arr, Graph};
use crate::util::stage_seed;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Hyperparameters for one supervised training run.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Clean-quality gates; training fails loudly when a model misses them.
pub const GATE_TOP1: f64 = 0.90;
pub const GATE_MAP: f64 = 0.50;
pub const GATE_MIOU: f64 = 0.60;

/// Default decoding thresholds for detector evaluation.
pub const DET_CONF_THRESHOLD: f64 = 0.05;
pub const DET_NMS_IOU: f64 = 0.45;

fn check_settings(settings: &TrainSettings) -> Result<()> {
    if settings.epochs == 0 {
        return Err(CtaError::Config("epochs must be >= 1".into()));
    }
    if settings.batch_size == 0 {
        return Err(CtaError::Config("batch_size must be >= 1".into()));
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(seed, &format!("shuffle/{epoch}")));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One optimizer step over a batch: builds a tape per image in parallel,
/// averages gradients in index order, applies Adam. Returns the mean loss.
fn batch_step<M, F>(
    model: &mut M,
    opt: &mut Adam,
    batch: &[usize],
    loss_builder: F,
) -> Result<f64>
where
    M: ParamModel + Sync,
    F: Fn(&M, usize, &mut Graph) -> crate::tensor::ValueId + Sync,
{
    let results: Result<Vec<(f64, Vec<Arr>)>> = batch
        .par_iter()
        .map(|&idx| {
            let mut g = Graph::new();
            let loss_id = loss_builder(model, idx, &mut g);
            let loss = scalar_value(g.value(loss_id));
            if !loss.is_finite() {
                return Err(CtaError::NonFinite(format!(
                    "loss for sample {idx} is {loss}"
                )));
            }
            let grads = g.backward(loss_id);
            let param_grads: Vec<Arr> = g
                .param_ids()
                .iter()
                .map(|&id| grads.get_or_zeros(&g, id))
                .collect();
            Ok((loss, param_grads))
        })
        .collect();
    let results = results?;

    let n = results.len() as f64;
    let mean_loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    let mut total = sum_grads(results.into_iter().map(|(_, g)| g).collect());
    for g in &mut total {
        g.mapv_inplace(|v| v / n);
    }
    opt.step(model.params_mut(), &total);
    Ok(mean_loss)
}

/// Train the classifier and gate it at Top-1 >= 0.90 on the test split.
pub fn train_classifier(
    train: &[MultiTaskSample],
    test: &[MultiTaskSample],
    image_size: usize,
    num_classes: usize,
    settings: &TrainSettings,
) -> Result<(Classifier, BTreeMap<String, f64>)> {
    check_settings(settings)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(settings.seed, "init/classifier"));
    let mut model = Classifier::new(&mut rng, image_size, num_classes);
    let mut opt = Adam::for_model(settings.lr, 0.9, 0.999, &model);

    for epoch in 0..settings.epochs {
        let order = shuffled_indices(train.len(), settings.seed, epoch);
        for batch in order.chunks(settings.batch_size) {
            batch_step(&mut model, &mut opt, batch, |m, idx, g| {
                let sample = &train[idx];
                let x = g.constant(sample.image.clone().into_dyn());
                let fwd = m.forward(g, x, true);
                g.softmax_cross_entropy(fwd.logits, sample.class_label)
            })
            .map_err(|e| CtaError::Training(format!("classifier epoch {epoch}: {e}")))?;
        }
    }

    let top1 = eval_classifier(&model, test)?;
    if top1 < GATE_TOP1 {
        return Err(CtaError::Training(format!(
            "classifier top1 {top1:.4} below required {GATE_TOP1:.2}"
        )));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("top1".into(), top1);
    Ok((model, metrics))
}

pub fn eval_classifier(model: &Classifier, samples: &[MultiTaskSample]) -> Result<f64> {
    let preds: Vec<usize> = samples
        .par_iter()
        .map(|s| super::predict_class(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    metrics::top1_accuracy(&preds, &labels)
}

/// Train the segmenter and gate it at mIoU >= 0.60 on the test split.
pub fn train_segmenter(
    train: &[MultiTaskSample],
    test: &[MultiTaskSample],
    image_size: usize,
    num_classes: usize,
    settings: &TrainSettings,
) -> Result<(Segmenter, BTreeMap<String, f64>)> {
    check_settings(settings)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(settings.seed, "init/segmenter"));
    let mut model = Segmenter::new(&mut rng, image_size, num_classes);
    let mut opt = Adam::for_model(settings.lr, 0.9, 0.999, &model);

    let targets: Vec<Array2<usize>> = train
        .iter()
        .map(|s| s.mask.mapv(|v| v as usize))
        .collect();

    for epoch in 0..settings.epochs {
        let order = shuffled_indices(train.len(), settings.seed, epoch);
        for batch in order.chunks(settings.batch_size) {
            batch_step(&mut model, &mut opt, batch, |m, idx, g| {
                let x = g.constant(train[idx].image.clone().into_dyn());
                let fwd = m.forward(g, x, true);
                g.spatial_softmax_cross_entropy(fwd.logits, targets[idx].clone())
            })
            .map_err(|e| CtaError::Training(format!("segmenter epoch {epoch}: {e}")))?;
        }
    }

    let (gcr, miou) = eval_segmenter(&model, test, num_classes)?;
    if miou < GATE_MIOU {
        return Err(CtaError::Training(format!(
            "segmenter miou {miou:.4} below required {GATE_MIOU:.2}"
        )));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("gcr".into(), gcr);
    metrics.insert("miou".into(), miou);
    Ok((model, metrics))
}

pub fn eval_segmenter(
    model: &Segmenter,
    samples: &[MultiTaskSample],
    num_classes: usize,
) -> Result<(f64, f64)> {
    let preds: Vec<Array2<u8>> = samples
        .par_iter()
        .map(|s| super::predict_mask(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    metrics::segmentation_gcr_miou(&preds, &gts, num_classes)
}

/// Per-image detector regression targets.
struct DetTargets {
    obj_t: Arr,
    obj_w: Arr,
    box_t: Arr,
    box_mask: Arr,
    /// (cell row, cell col, class id)
    pos: Vec<(usize, usize, usize)>,
}

fn det_targets(sample: &MultiTaskSample, image_size: usize, grid: usize) -> DetTargets {
    let cell = image_size as f64 / grid as f64;
    let mut obj_t = ndarray::Array3::<f64>::zeros((1, grid, grid));
    let mut obj_w = ndarray::Array3::<f64>::from_elem((1, grid, grid), 0.5);
    let mut box_t = ndarray::Array3::<f64>::zeros((4, grid, grid));
    let mut box_mask = ndarray::Array3::<f64>::zeros((4, grid, grid));
    let mut owner_area = Array2::<u64>::zeros((grid, grid));
    let mut pos = Vec::new();

    for b in &sample.boxes {
        let cx = f64::from(b.x_min + b.x_max) / 2.0;
        let cy = f64::from(b.y_min + b.y_max) / 2.0;
        let j = ((cx / cell) as usize).min(grid - 1);
        let i = ((cy / cell) as usize).min(grid - 1);
        // one box per cell: keep the largest when centers collide
        if obj_t[[0, i, j]] == 1.0 && owner_area[[i, j]] >= b.area() {
            continue;
        }
        if obj_t[[0, i, j]] == 1.0 {
            pos.retain(|&(pi, pj, _)| (pi, pj) != (i, j));
        }
        owner_area[[i, j]] = b.area();
        obj_t[[0, i, j]] = 1.0;
        obj_w[[0, i, j]] = 2.0;
        box_t[[0, i, j]] = cx / cell - j as f64;
        box_t[[1, i, j]] = cy / cell - i as f64;
        box_t[[2, i, j]] = f64::from(b.x_max - b.x_min) / image_size as f64;
        box_t[[3, i, j]] = f64::from(b.y_max - b.y_min) / image_size as f64;
        for c in 0..4 {
            box_mask[[c, i, j]] = 1.0;
        }
        pos.push((i, j, b.class_id));
    }
    DetTargets {
        obj_t: obj_t.into_dyn(),
        obj_w: obj_w.into_dyn(),
        box_t: box_t.into_dyn(),
        box_mask: box_mask.into_dyn(),
        pos,
    }
}

/// Train the detector and gate it at mAP@0.5 >= 0.50 on the test split.
pub fn train_detector(
    train: &[MultiTaskSample],
    test: &[MultiTaskSample],
    image_size: usize,
    num_classes: usize,
    settings: &TrainSettings,
) -> Result<(Detector, BTreeMap<String, f64>)> {
    check_settings(settings)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(settings.seed, "init/detector"));
    let mut model = Detector::new(&mut rng, image_size, num_classes);
    let mut opt = Adam::for_model(settings.lr, 0.9, 0.999, &model);
    let grid = model.grid();

    let targets: Vec<DetTargets> = train
        .iter()
        .map(|s| det_targets(s, image_size, grid))
        .collect();

    for epoch in 0..settings.epochs {
        let order = shuffled_indices(train.len(), settings.seed, epoch);
        for batch in order.chunks(settings.batch_size) {
            batch_step(&mut model, &mut opt, batch, |m, idx, g| {
                let t = &targets[idx];
                let x = g.constant(train[idx].image.clone().into_dyn());
                let fwd = m.forward(g, x, true);

                let obj_loss = g.bce_mean(fwd.obj, t.obj_t.clone(), t.obj_w.clone());

                let sig = g.sigmoid(fwd.boxes);
                let tgt = g.constant(t.box_t.clone());
                let diff = g.sub(sig, tgt);
                let sq = g.mul(diff, diff);
                let masked = g.mul_const(sq, t.box_mask.clone());
                let box_sum = g.sum_all(masked);
                let n_pos = t.pos.len().max(1) as f64;
                let box_loss = g.scale(box_sum, 2.0 / (4.0 * n_pos));

                let mut total = g.add(obj_loss, box_loss);
                if !t.pos.is_empty() {
                    let mut cls_sum = None;
                    for &(i, j, class_id) in &t.pos {
                        let fiber = g.slice_spatial(fwd.classes, i, j);
                        let ce = g.softmax_cross_entropy(fiber, class_id);
                        cls_sum = Some(match cls_sum {
                            None => ce,
                            Some(acc) => g.add(acc, ce),
                        });
                    }
                    let cls_mean = g.scale(cls_sum.expect("nonempty pos"), 1.0 / n_pos);
                    total = g.add(total, cls_mean);
                }
                total
            })
            .map_err(|e| CtaError::Training(format!("detector epoch {epoch}: {e}")))?;
        }
    }

    let (map, mar) = eval_detector(&model, test)?;
    if map < GATE_MAP {
        return Err(CtaError::Training(format!(
            "detector map {map:.4} below required {GATE_MAP:.2}"
        )));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("map".into(), map);
    metrics.insert("mar".into(), mar);
    Ok((model, metrics))
}

pub fn eval_detector(model: &Detector, samples: &[MultiTaskSample]) -> Result<(f64, f64)> {
    let preds: Vec<Vec<metrics::DetPred>> = samples
        .par_iter()
        .map(|s| super::predict_boxes(model, &s.image, DET_CONF_THRESHOLD, DET_NMS_IOU))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<metrics::GtBox>> = samples
        .iter()
        .map(|s| s.boxes.iter().map(metrics::GtBox::from).collect())
        .collect();
    metrics::detection_map_mar(&preds, &gts, 0.5)
}

/// Adversarial-evaluation inputs: images only (labels never leave this side).
pub fn images_of(samples: &[MultiTaskSample]) -> Vec<Array3<f64>> {
    samples.iter().map(|s| s.image.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sample, SceneSpec};
    use crate::nn::weights_hash;

    fn tiny_dataset(n: usize, seed: u64) -> Vec<MultiTaskSample> {
        let spec = SceneSpec {
            rng_seed: seed,
            ..Default::default()
        };
        (0..n as u64)
            .map(|i| generate_sample(&spec, i).unwrap())
            .collect()
    }

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            epochs,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
        }
    }

    #[test]
    fn zero_epochs_rejected_with_message() {
        let data = tiny_dataset(2, 0);
        let err = train_classifier(&data, &data, 64, 4, &settings(0)).unwrap_err();
        assert!(err.to_string().contains("epochs must be >= 1"), "{err}");
    }

    #[test]
    fn classifier_training_is_deterministic() {
        let data = tiny_dataset(8, 1);
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(0, "init/classifier"));
            let mut model = Classifier::new(&mut rng, 64, 4);
            let mut opt = Adam::for_model(2e-3, 0.9, 0.999, &model);
            for epoch in 0..2 {
                let order = shuffled_indices(data.len(), 0, epoch);
                for batch in order.chunks(4) {
                    batch_step(&mut model, &mut opt, batch, |m, idx, g| {
                        let x = g.constant(data[idx].image.clone().into_dyn());
                        let fwd = m.forward(g, x, true);
                        g.softmax_cross_entropy(fwd.logits, data[idx].class_label)
                    })
                    .unwrap();
                }
            }
            weights_hash(&model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss_on_tiny_data() {
        let data = tiny_dataset(8, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut model = Classifier::new(&mut rng, 64, 4);
        let mut opt = Adam::for_model(3e-3, 0.9, 0.999, &model);
        let batch: Vec<usize> = (0..8).collect();
        let loss_of = |model: &mut Classifier, opt: &mut Adam| {
            batch_step(model, opt, &batch, |m, idx, g| {
                let x = g.constant(data[idx].image.clone().into_dyn());
                let fwd = m.forward(g, x, true);
                g.softmax_cross_entropy(fwd.logits, data[idx].class_label)
            })
            .unwrap()
        };
        let first = loss_of(&mut model, &mut opt);
        let mut last = first;
        for _ in 0..30 {
            last = loss_of(&mut model, &mut opt);
        }
        assert!(
            last < first * 0.5,
            "loss must drop when memorizing 8 images: {first} -> {last}"
        );
    }

    #[test]
    fn det_targets_assign_centers_to_cells() {
        let data = tiny_dataset(6, 3);
        for s in &data {
            let t = det_targets(s, 64, 8);
            assert_eq!(t.pos.len() as f64, t.obj_t.sum());
            for &(i, j, class_id) in &t.pos {
                assert!(i < 8 && j < 8 && class_id < 4);
                assert_eq!(t.obj_w[[0, i, j]], 2.0);
                // targets are valid sigmoid outputs
                for c in 0..4 {
                    let v = t.box_t[[c, i, j]];
                    assert!((0.0..=1.0).contains(&v), "box target {v}");
                }
            }
            assert_eq!(t.box_mask.sum(), 4.0 * t.pos.len() as f64);
        }
    }
}
