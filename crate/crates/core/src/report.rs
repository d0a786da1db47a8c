//! Cross-task evaluation: runs each configured attack against all three task
//! models on the test split and assembles the comparative score table, the
//! attention-shift summary, and per-category figure data.

use crate::attack::{self, PerturbationGenerator};
use crate::attention::attention_mass_fraction;
use crate::datagen::{MultiTaskSample, CLASS_NAMES};
use crate::error::{CtaError, Result};
use crate::metrics;
use crate::models::{predict_boxes, predict_class, predict_mask, train, TaskModelBundle};
use crate::util::{round4, stage_seed};
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Attack selector for evaluation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Clean,
    GaussianNoise,
    Dr,
    Cta,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::Dr => "dr",
            AttackKind::Cta => "cta",
        }
    }
}

/// One (attack, epsilon) row of task metrics, all fractions in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub attack: String,
    /// None for the clean row.
    pub epsilon: Option<f64>,
    pub cls_top1: f64,
    pub det_map: f64,
    pub det_mar: f64,
    pub seg_gcr: f64,
    pub seg_miou: f64,
}

/// Mean foreground attention-mass fractions, clean vs adversarial.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionShiftRow {
    pub attack: String,
    pub epsilon: f64,
    pub clean_foreground_mass: f64,
    pub adversarial_foreground_mass: f64,
}

/// The comparative report (serialized as `report.json`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub epsilons: Vec<f64>,
    pub global_seed: u64,
    pub rows: Vec<ReportRow>,
    pub attention_shift: Vec<AttentionShiftRow>,
    /// Per class-name AP (detection) per row label.
    pub det_ap_by_class: BTreeMap<String, Vec<Option<f64>>>,
    /// Per id IoU (index 0 = background) per row label.
    pub seg_iou_by_class: BTreeMap<String, Vec<Option<f64>>>,
    /// Orientation-only full-scale reference values; not reproduced here.
    pub reference_note: String,
}

const REFERENCE_NOTE: &str = "Full-scale reference values (ImageNet/VOC models: clean VGG19 \
top-1 72.9%, clean DeepLabv3 mIoU 76.3%) are NOT reproduced at this synthetic desk scale; \
rows above are comparable only against each other.";

/// Produce adversarial test images for one attack at one epsilon.
pub fn run_attack(
    kind: AttackKind,
    images: &[Array3<f64>],
    bundle: &TaskModelBundle,
    generator: Option<&PerturbationGenerator>,
    epsilon: f64,
    global_seed: u64,
    dr_steps: usize,
) -> Result<Vec<Array3<f64>>> {
    match kind {
        AttackKind::Clean => Ok(images.to_vec()),
        AttackKind::GaussianNoise => images
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let seed = stage_seed(global_seed, &format!("gaussian/{epsilon}/{i}"));
                attack::gaussian_noise_attack(x, epsilon, seed)
            })
            .collect(),
        AttackKind::Dr => images
            .par_iter()
            .map(|x| attack::dr_attack(x, &bundle.classifier, dr_steps, epsilon / 10.0, epsilon))
            .collect(),
        AttackKind::Cta => {
            let gen = generator.ok_or_else(|| {
                CtaError::MissingArtifact(format!("generator(epsilon={epsilon})"))
            })?;
            images
                .par_iter()
                .map(|x| attack::apply_generator(gen, x))
                .collect()
        }
    }
}

/// Evaluate all three tasks on (possibly attacked) images.
pub fn evaluate_tasks(
    bundle: &TaskModelBundle,
    images: &[Array3<f64>],
    samples: &[MultiTaskSample],
) -> Result<(f64, f64, f64, f64, f64)> {
    let cls_preds: Vec<usize> = images
        .par_iter()
        .map(|img| predict_class(&bundle.classifier, img))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    let top1 = metrics::top1_accuracy(&cls_preds, &labels)?;

    let det_preds: Vec<Vec<metrics::DetPred>> = images
        .par_iter()
        .map(|img| {
            predict_boxes(
                &bundle.detector,
                img,
                train::DET_CONF_THRESHOLD,
                train::DET_NMS_IOU,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<metrics::GtBox>> = samples
        .iter()
        .map(|s| s.boxes.iter().map(metrics::GtBox::from).collect())
        .collect();
    let (map, mar) = metrics::detection_map_mar(&det_preds, &gts, 0.5)?;

    let seg_preds: Vec<ndarray::Array2<u8>> = images
        .par_iter()
        .map(|img| predict_mask(&bundle.segmenter, img))
        .collect::<Result<Vec<_>>>()?;
    let gt_masks: Vec<ndarray::Array2<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let (gcr, miou) = metrics::segmentation_gcr_miou(&seg_preds, &gt_masks, bundle.num_classes)?;

    Ok((top1, map, mar, gcr, miou))
}

/// Mean foreground attention-mass fraction (extractor attention) for clean
/// images and for images transformed by `attack_fn`.
pub fn attention_shift_report(
    bundle: &TaskModelBundle,
    samples: &[MultiTaskSample],
    attack_fn: &(dyn Fn(&Array3<f64>) -> Result<Array3<f64>> + Sync),
) -> Result<(f64, f64)> {
    let fractions: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let fg = s.foreground();
            let clean_map = attack::adversarial_attention(bundle.extractor(), &s.image)?;
            let clean_frac = attention_mass_fraction(&clean_map, &fg)?;
            let adv_img = attack_fn(&s.image)?;
            let adv_map = attack::adversarial_attention(bundle.extractor(), &adv_img)?;
            let adv_frac = attention_mass_fraction(&adv_map, &fg)?;
            Ok((clean_frac, adv_frac))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = fractions.len() as f64;
    let clean = fractions.iter().map(|(c, _)| c).sum::<f64>() / n;
    let adv = fractions.iter().map(|(_, a)| a).sum::<f64>() / n;
    Ok((clean, adv))
}

/// Inputs for [`build_report`].
pub struct ReportInputs<'a> {
    pub bundle: &'a TaskModelBundle,
    pub samples: &'a [MultiTaskSample],
    pub attacks: &'a [AttackKind],
    pub epsilons: &'a [f64],
    /// One trained generator per epsilon (same order as `epsilons`).
    pub generators: &'a [Option<PerturbationGenerator>],
    pub global_seed: u64,
    pub dr_steps: usize,
    pub dataset_id: String,
}

/// Evaluate every (attack, epsilon, task) cell plus the clean row.
pub fn build_report(inputs: &ReportInputs) -> Result<MetricsReport> {
    if inputs.samples.is_empty() {
        return Err(CtaError::InvalidInput("empty evaluation split".into()));
    }
    let images: Vec<Array3<f64>> = inputs.samples.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<Vec<metrics::GtBox>> = inputs
        .samples
        .iter()
        .map(|s| s.boxes.iter().map(metrics::GtBox::from).collect())
        .collect();
    let gt_masks: Vec<ndarray::Array2<u8>> =
        inputs.samples.iter().map(|s| s.mask.clone()).collect();

    let mut rows = Vec::new();
    let mut det_by_class = BTreeMap::new();
    let mut seg_by_class = BTreeMap::new();
    let mut attention_shift = Vec::new();

    let mut eval_into = |label: String,
                         epsilon: Option<f64>,
                         adv_images: &[Array3<f64>]|
     -> Result<()> {
        let (top1, map, mar, gcr, miou) = evaluate_tasks(inputs.bundle, adv_images, inputs.samples)?;
        rows.push(ReportRow {
            attack: label.clone(),
            epsilon: epsilon.map(round4),
            cls_top1: round4(top1),
            det_map: round4(map),
            det_mar: round4(mar),
            seg_gcr: round4(gcr),
            seg_miou: round4(miou),
        });
        let det_preds: Vec<Vec<metrics::DetPred>> = adv_images
            .par_iter()
            .map(|img| {
                predict_boxes(
                    &inputs.bundle.detector,
                    img,
                    train::DET_CONF_THRESHOLD,
                    train::DET_NMS_IOU,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ap = metrics::detection_ap_per_class(&det_preds, &gts, inputs.bundle.num_classes, 0.5)?;
        det_by_class.insert(
            label.clone(),
            ap.into_iter().map(|v| v.map(round4)).collect(),
        );
        let seg_preds: Vec<ndarray::Array2<u8>> = adv_images
            .par_iter()
            .map(|img| predict_mask(&inputs.bundle.segmenter, img))
            .collect::<Result<Vec<_>>>()?;
        let iou =
            metrics::segmentation_iou_per_class(&seg_preds, &gt_masks, inputs.bundle.num_classes)?;
        seg_by_class.insert(label, iou.into_iter().map(|v| v.map(round4)).collect());
        Ok(())
    };

    for kind in inputs.attacks {
        match kind {
            AttackKind::Clean => eval_into("clean".into(), None, &images)?,
            _ => {
                for (ei, &eps) in inputs.epsilons.iter().enumerate() {
                    let generator = inputs.generators[ei].as_ref();
                    let adv = run_attack(
                        *kind,
                        &images,
                        inputs.bundle,
                        generator,
                        eps,
                        inputs.global_seed,
                        inputs.dr_steps,
                    )?;
                    // safety net: no attack may emit out-of-ball images
                    attack::AdversarialBatch::new(images.clone(), adv.clone(), eps)?;
                    let label = format!("{}@eps{}", kind.label(), eps_tag(eps));
                    eval_into(label, Some(eps), &adv)?;

                    if *kind == AttackKind::Cta {
                        let gen = generator.ok_or_else(|| {
                            CtaError::MissingArtifact(format!("generator(epsilon={eps})"))
                        })?;
                        let (clean_mass, adv_mass) = attention_shift_report(
                            inputs.bundle,
                            inputs.samples,
                            &|x| attack::apply_generator(gen, x),
                        )?;
                        attention_shift.push(AttentionShiftRow {
                            attack: kind.label().into(),
                            epsilon: round4(eps),
                            clean_foreground_mass: round4(clean_mass),
                            adversarial_foreground_mass: round4(adv_mass),
                        });
                    }
                }
            }
        }
    }

    Ok(MetricsReport {
        dataset_id: inputs.dataset_id.clone(),
        epsilons: inputs.epsilons.iter().map(|&e| round4(e)).collect(),
        global_seed: inputs.global_seed,
        rows,
        attention_shift,
        det_ap_by_class: det_by_class,
        seg_iou_by_class: seg_by_class,
        reference_note: REFERENCE_NOTE.into(),
    })
}

/// 8-bit tag for an epsilon value, used in paths and row labels.
pub fn eps_tag(eps: f64) -> String {
    format!("{}", (eps * 255.0).round() as u32)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per (attack, epsilon).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "attack", "top1", "mAP", "mAR", "GCR", "mIoU"
        ));
        out.push_str(&"-".repeat(68));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.attack,
                r.cls_top1 * 100.0,
                r.det_map * 100.0,
                r.det_mar * 100.0,
                r.seg_gcr * 100.0,
                r.seg_miou * 100.0
            ));
        }
        for s in &self.attention_shift {
            out.push_str(&format!(
                "\nforeground attention mass ({} eps={:.4}): clean {:.4} -> adversarial {:.4}\n",
                s.attack, s.epsilon, s.clean_foreground_mass, s.adversarial_foreground_mass
            ));
        }
        out.push('\n');
        out.push_str(&self.reference_note);
        out.push('\n');
        out
    }

    /// Per-category CSV (detection AP by class, one column per row label).
    pub fn det_csv(&self) -> String {
        per_class_csv(&self.det_ap_by_class, &det_class_names())
    }

    /// Per-category CSV (segmentation IoU by id, background first).
    pub fn seg_csv(&self) -> String {
        per_class_csv(&self.seg_iou_by_class, &seg_class_names())
    }

    pub fn write_files(&self, reports_dir: &Path, figures_dir: &Path) -> Result<()> {
        crate::util::write_bytes(&reports_dir.join("report.json"), self.to_json()?.as_bytes())?;
        crate::util::write_bytes(&reports_dir.join("report.txt"), self.to_table().as_bytes())?;
        crate::util::write_bytes(&figures_dir.join("det_ap_by_class.csv"), self.det_csv().as_bytes())?;
        crate::util::write_bytes(&figures_dir.join("seg_iou_by_class.csv"), self.seg_csv().as_bytes())?;
        Ok(())
    }
}

fn det_class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn seg_class_names() -> Vec<String> {
    std::iter::once("background".to_string())
        .chain(CLASS_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

fn per_class_csv(data: &BTreeMap<String, Vec<Option<f64>>>, class_names: &[String]) -> String {
    let mut out = String::from("class");
    for label in data.keys() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, name) in class_names.iter().enumerate() {
        out.push_str(name);
        for values in data.values() {
            out.push(',');
            match values.get(i).copied().flatten() {
                Some(v) => out.push_str(&format!("{v:.4}")),
                None => out.push_str("absent"),
            }
        }
        out.push('\n');
    }
    out
}
