//! Self-supervised attention-shift training.
//!
//! Per clean image, the frozen task models yield a co-attention map whose
//! complement (the anti-attention map) is the regression target. The
//! generator produces a bounded perturbation; the frozen extractor reads the
//! adversarial image's attention back out; the generator descends the MSE
//! between that attention and the target. No ground-truth labels enter this
//! module: the trainer consumes images only.

use super::{AttackConfig, PerturbationGenerator};
use crate::attention::{
    anti_attention, attention_at_image_resolution, co_attention, grad_cam_weights, AntiAttentionMap,
    AttentionMap, CoAttentionMap,
};
use crate::error::{CtaError, Result};
use crate::models::{cls_score_node, Classifier, TaskKind, TaskModelBundle};
use crate::nn::{sum_grads, Adam, ParamModel};
use crate::tensor::{scalar_value, Arr, Graph, ValueId};
use crate::util::stage_seed;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mean squared error between the anti-attention target and an adversarial
/// attention map (Eq. 9 shape).
pub fn cta_loss(anti: &AntiAttentionMap, adv: &AttentionMap) -> Result<f64> {
    if anti.values.dim() != adv.values.dim() {
        return Err(CtaError::InvalidInput(format!(
            "cta_loss shape mismatch: {:?} vs {:?}",
            anti.values.dim(),
            adv.values.dim()
        )));
    }
    let n = anti.values.len() as f64;
    Ok(anti
        .values
        .iter()
        .zip(adv.values.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Attention extraction stage: per-task Grad-CAM maps fused into co-attention
/// and inverted into the anti-attention target. Pure in (bundle, image).
pub fn extract_co_anti(
    bundle: &TaskModelBundle,
    image: &Array3<f64>,
) -> Result<(CoAttentionMap, AntiAttentionMap)> {
    let size = bundle.image_size;
    let mut maps = Vec::with_capacity(3);
    for task in [TaskKind::Cls, TaskKind::Det, TaskKind::Seg] {
        let (features, grads) = crate::models::tap_features_and_grads(task, bundle, image)?;
        maps.push(attention_at_image_resolution(&features, &grads, size, size)?);
    }
    let co = co_attention(&maps)?;
    let anti = anti_attention(&co)?;
    Ok((co, anti))
}

/// Grad-CAM channel weights for the extractor head at given tap features:
/// the spatially averaged gradient of the top-class logit.
fn extractor_cam_weights(extractor: &Classifier, features: &Arr) -> (ndarray::Array1<f64>, usize) {
    let mut g = Graph::new();
    let f = g.leaf_with_grad(features.clone());
    let logits = extractor.head_from_tap(&mut g, f, false);
    let (score, class_id) = cls_score_node(&mut g, logits);
    let grads = g.backward(score);
    let df = grads
        .get_or_zeros(&g, f)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("tap grad is CHW");
    (grad_cam_weights(&df.view()), class_id)
}

/// Build the differentiable adversarial-attention pipeline on `g` from an
/// in-graph adversarial image: extractor trunk to the tap, Grad-CAM with the
/// head's channel weights, min-max normalization, bilinear upsampling to
/// image resolution. Returns the map node (values in [0,1]).
pub fn adversarial_attention_node(
    g: &mut Graph,
    extractor: &Classifier,
    x_adv: ValueId,
) -> ValueId {
    let fwd = extractor.forward(g, x_adv, false);
    let (alpha, _) = extractor_cam_weights(extractor, g.value(fwd.tap));
    let weighted = g.channel_weighted_sum(fwd.tap, alpha);
    let cam = g.relu(weighted);

    let lo_v = g.value(cam).iter().copied().fold(f64::INFINITY, f64::min);
    let hi_v = g
        .value(cam)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let size = extractor.image_size;
    let normed = if hi_v == lo_v {
        // degenerate constant map carries no signal; gradient-free zeros
        let (h, w) = (g.value(cam).shape()[0], g.value(cam).shape()[1]);
        g.constant(Array2::<f64>::zeros((h, w)).into_dyn())
    } else {
        let lo = g.min_all(cam);
        let hi = g.max_all(cam);
        let range = g.sub(hi, lo);
        let shifted = g.sub_scalar_node(cam, lo);
        g.div_scalar_node(shifted, range)
    };
    g.upsample_bilinear(normed, size, size)
}

/// Adversarial attention as a plain normalized map at image resolution.
pub fn adversarial_attention(
    extractor: &Classifier,
    x_adv: &Array3<f64>,
) -> Result<AttentionMap> {
    crate::models::check_image(x_adv, extractor.image_size)?;
    let mut g = Graph::new();
    let x = g.constant(x_adv.clone().into_dyn());
    let map = adversarial_attention_node(&mut g, extractor, x);
    let values = g
        .value(map)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("attention map is 2-D");
    Ok(AttentionMap {
        values,
        normalized: true,
    })
}

/// In-graph Eq. 9 loss from an adversarial-image node: MSE between the
/// extractor's attention map and the (constant) anti-attention target.
pub fn cta_image_loss(
    g: &mut Graph,
    extractor: &Classifier,
    x_adv: ValueId,
    anti: &Array2<f64>,
) -> ValueId {
    let map = adversarial_attention_node(g, extractor, x_adv);
    let target = g.constant(anti.clone().into_dyn());
    g.mse(map, target)
}

/// Eq. 7 + Eq. 8 in-graph: generator perturbation, epsilon-ball clip, [0,1]
/// clamp. Returns the adversarial-image node.
fn adversarial_image_node(
    g: &mut Graph,
    gen: &PerturbationGenerator,
    image: &Array3<f64>,
    epsilon: f64,
    trainable: bool,
) -> ValueId {
    let x = g.constant(image.clone().into_dyn());
    let delta = gen.forward(g, x, trainable);
    let x_prime = g.add(x, delta);
    let lo = g.constant(image.mapv(|v| v - epsilon).into_dyn());
    let hi = g.constant(image.mapv(|v| v + epsilon).into_dyn());
    let ball = g.elem_max(x_prime, lo);
    let ball = g.elem_min(ball, hi);
    g.clamp_scalar(ball, 0.0, 1.0)
}

/// Apply a trained generator to one image, with the formal Eq. 8 guarantee.
pub fn apply_generator(
    gen: &PerturbationGenerator,
    image: &Array3<f64>,
) -> Result<Array3<f64>> {
    let (_, x_prime) = gen.apply(image)?;
    super::clip_adversarial(image, &x_prime, gen.epsilon_train)
}

/// One epoch record of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_linf: f64,
}

/// Training log: one record per epoch, serialized as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_jsonl(path, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(TrainLog {
            records: crate::util::read_jsonl(path)?,
        })
    }

    /// Mean loss over the first and last quarter of epochs.
    pub fn quarter_means(&self) -> (f64, f64) {
        let n = self.records.len();
        let q = (n / 4).max(1);
        let first: f64 = self.records[..q].iter().map(|r| r.mean_loss).sum::<f64>() / q as f64;
        let last: f64 = self.records[n - q..].iter().map(|r| r.mean_loss).sum::<f64>() / q as f64;
        (first, last)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.mean_loss)
    }
}

/// Train the perturbation generator by attention shift (the self-supervised
/// loop). Consumes images only; task models stay frozen throughout.
///
/// Per-image anti-attention targets are computed once up front: the task
/// models are frozen, so the targets are constants of the run.
pub fn train_cta(
    images: &[Array3<f64>],
    bundle: &TaskModelBundle,
    config: &AttackConfig,
    snapshot_dir: Option<&Path>,
) -> Result<(PerturbationGenerator, TrainLog)> {
    config.validate()?;
    if images.is_empty() {
        return Err(CtaError::InvalidInput(
            "train_cta needs a nonempty image set".into(),
        ));
    }
    let images: Vec<&Array3<f64>> = match config.max_train_images {
        Some(cap) => images.iter().take(cap.max(1)).collect(),
        None => images.iter().collect(),
    };
    for img in &images {
        crate::models::check_image(img, bundle.image_size)?;
    }

    let anti_maps: Vec<Array2<f64>> = images
        .par_iter()
        .map(|img| extract_co_anti(bundle, img).map(|(_, anti)| anti.values))
        .collect::<Result<Vec<_>>>()?;

    let mut gen = PerturbationGenerator::new(
        stage_seed(config.seed, "generator-init"),
        bundle.image_size,
        config.epsilon,
    )?;
    let mut opt = Adam::for_model(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        &gen,
    );

    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(stage_seed(config.seed, &format!("cta-shuffle/{epoch}")));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut linf_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Result<Vec<(f64, f64, Vec<Arr>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut g = Graph::new();
                    let x_adv =
                        adversarial_image_node(&mut g, &gen, images[idx], config.epsilon, true);
                    let loss_id = cta_image_loss(&mut g, bundle.extractor(), x_adv, &anti_maps[idx]);
                    let loss = scalar_value(g.value(loss_id));
                    if !loss.is_finite() {
                        return Err(CtaError::NonFinite(format!(
                            "cta loss at epoch {epoch} batch {batch_idx} image {idx}"
                        )));
                    }
                    let adv = g.value(x_adv);
                    let linf = adv
                        .iter()
                        .zip(images[idx].iter())
                        .fold(0.0f64, |m, (&a, &c)| m.max((a - c).abs()));
                    let grads = g.backward(loss_id);
                    let param_grads: Vec<Arr> = g
                        .param_ids()
                        .iter()
                        .map(|&id| grads.get_or_zeros(&g, id))
                        .collect();
                    Ok((loss, linf, param_grads))
                })
                .collect();
            let results = results?;
            let n = results.len() as f64;
            loss_sum += results.iter().map(|(l, _, _)| l).sum::<f64>();
            linf_sum += results.iter().map(|(_, d, _)| d).sum::<f64>();
            let mut total = sum_grads(results.into_iter().map(|(_, _, g)| g).collect());
            for gr in &mut total {
                gr.mapv_inplace(|v| v / n);
            }
            opt.step(gen.params_mut(), &total);
        }

        log.records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / images.len() as f64,
            mean_linf: linf_sum / images.len() as f64,
        });

        if let (Some(dir), Some(every)) = (snapshot_dir, config.snapshot_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                let probe = images[0];
                let x_adv = apply_generator(&gen, probe)?;
                let map = adversarial_attention(bundle.extractor(), &x_adv)?;
                crate::viz::save_attention_png(
                    &dir.join(format!("snap_epoch_{:03}.png", epoch + 1)),
                    &map,
                )?;
            }
        }
    }

    Ok((gen, log))
}
