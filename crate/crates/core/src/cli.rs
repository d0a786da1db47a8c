//! Command implementations behind the `cta` binary. Each command validates
//! the artifacts it needs and names whatever is missing.

use crate::attack;
use crate::config::RunConfig;
use crate::datagen::{self, LoadedDataset};
use crate::error::{CtaError, Result};
use crate::models::{self, train, ModelMeta, TaskModelBundle};
use crate::report::{self, eps_tag, AttackKind, ReportInputs};
use crate::util::{self, stage_seed};
use crate::viz;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Generate the synthetic dataset under `out/dataset`.
pub fn cmd_datagen(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let spec = config.dataset.scene_spec(config.seed);
    let manifest = datagen::generate_dataset(
        &spec,
        config.dataset.n_train,
        config.dataset.n_test,
        &config.dataset_dir(),
    )?;
    println!(
        "dataset: {} train + {} test samples at {}",
        manifest.count("train"),
        manifest.count("test"),
        config.dataset_dir().display()
    );
    Ok(())
}

fn load_dataset_checked(config: &RunConfig) -> Result<LoadedDataset> {
    datagen::load_dataset(&config.dataset_dir())
}

/// Train classifier, detector and segmenter; freeze the classifier as the
/// extractor; write all four checkpoints under `out/models`.
pub fn cmd_train_models(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let data = load_dataset_checked(config)?;
    let size = config.dataset.image_size;
    let classes = config.dataset.num_classes;
    let mc = &config.models;

    let settings = |epochs: usize, stage: &str| train::TrainSettings {
        epochs,
        batch_size: mc.batch_size,
        lr: mc.learning_rate,
        seed: stage_seed(config.seed, stage),
    };

    let (classifier, cls_metrics) = train::train_classifier(
        &data.train,
        &data.test,
        size,
        classes,
        &settings(mc.classifier_epochs, "models/classifier"),
    )?;
    println!("classifier: top1 {:.4}", cls_metrics["top1"]);

    let (detector, det_metrics) = train::train_detector(
        &data.train,
        &data.test,
        size,
        classes,
        &settings(mc.detector_epochs, "models/detector"),
    )?;
    println!(
        "detector: map {:.4} mar {:.4}",
        det_metrics["map"], det_metrics["mar"]
    );

    let (segmenter, seg_metrics) = train::train_segmenter(
        &data.train,
        &data.test,
        size,
        classes,
        &settings(mc.segmenter_epochs, "models/segmenter"),
    )?;
    println!(
        "segmenter: gcr {:.4} miou {:.4}",
        seg_metrics["gcr"], seg_metrics["miou"]
    );

    let meta = |task: &str, arch: &str, tap: &str, stage: &str, m: &std::collections::BTreeMap<String, f64>| ModelMeta {
        task: task.into(),
        architecture_id: arch.into(),
        tap_layer_id: tap.into(),
        train_seed: stage_seed(config.seed, stage),
        clean_metrics: m.clone(),
        num_classes: classes,
        image_size: size,
    };

    let dir = config.models_dir();
    models::save_model(
        &dir.join("classifier"),
        &classifier,
        &meta("cls", models::CLS_ARCH_ID, models::CLS_TAP_ID, "models/classifier", &cls_metrics),
    )?;
    models::save_model(
        &dir.join("detector"),
        &detector,
        &meta("det", models::DET_ARCH_ID, models::DET_TAP_ID, "models/detector", &det_metrics),
    )?;
    models::save_model(
        &dir.join("segmenter"),
        &segmenter,
        &meta("seg", models::SEG_ARCH_ID, models::SEG_TAP_ID, "models/segmenter", &seg_metrics),
    )?;
    // the extractor is the frozen classifier; stored separately so its
    // integrity can be checked independently
    models::save_model(
        &dir.join("extractor_d"),
        &classifier,
        &meta("extractor", models::CLS_ARCH_ID, models::CLS_TAP_ID, "models/classifier", &cls_metrics),
    )?;
    println!("models saved under {}", dir.display());
    Ok(())
}

/// Load the frozen bundle, verifying the stored extractor matches the
/// classifier weights bit-for-bit.
pub fn load_bundle(config: &RunConfig) -> Result<TaskModelBundle> {
    let dir = config.models_dir();
    let (classifier, _) = models::load_classifier(&dir.join("classifier"))?;
    let (detector, _) = models::load_detector(&dir.join("detector"))?;
    let (segmenter, _) = models::load_segmenter(&dir.join("segmenter"))?;
    let (extractor, _) = models::load_classifier(&dir.join("extractor_d"))?;
    if crate::nn::weights_hash(&extractor) != crate::nn::weights_hash(&classifier) {
        return Err(CtaError::InvalidInput(
            "stored extractor_d weights differ from the classifier".into(),
        ));
    }
    Ok(TaskModelBundle::new(classifier, detector, segmenter))
}

/// Train one perturbation generator per configured epsilon.
pub fn cmd_train_attack(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let data = load_dataset_checked(config)?;
    let bundle = load_bundle(config)?;
    let images = train::images_of(&data.train);

    for &eps in &config.attack.epsilons {
        let attack_config = config.attack.attack_config(config.seed, eps);
        let dir = config.generator_dir(eps);
        util::create_dir_all(&dir)?;
        let (gen, log) = attack::train_cta(&images, &bundle, &attack_config, Some(&dir))?;
        let meta = attack::GeneratorMeta {
            epsilon: eps,
            config: attack_config.clone(),
            final_loss: log.final_loss(),
            train_seed: attack_config.seed,
            image_size: config.dataset.image_size,
        };
        attack::save_generator(&dir, &gen, &meta)?;
        log.save(&dir.join("log.jsonl"))?;
        let (first, last) = log.quarter_means();
        println!(
            "generator eps={}: final loss {:.6} (first-quarter {:.6} -> last-quarter {:.6})",
            eps_tag(eps),
            log.final_loss(),
            first,
            last
        );
    }
    Ok(())
}

fn load_generator_for(config: &RunConfig, epsilon: f64) -> Result<attack::PerturbationGenerator> {
    let dir = config.generator_dir(epsilon);
    if !dir.join(attack::GEN_META_FILE).exists() {
        return Err(CtaError::MissingArtifact(format!(
            "generator(epsilon={})",
            eps_tag(epsilon)
        )));
    }
    let (gen, _) = attack::load_generator(&dir)?;
    Ok(gen)
}

#[derive(Serialize, Deserialize)]
struct LinfRecord {
    file: String,
    linf: f64,
}

/// Apply trained generators to input images (the test split by default) and
/// write adversarial PNGs plus a per-image L-infinity manifest.
pub fn cmd_attack(config: &RunConfig, image_paths: &[PathBuf]) -> Result<()> {
    config.validate()?;
    let inputs: Vec<(String, Array3<f64>)> = if image_paths.is_empty() {
        let data = load_dataset_checked(config)?;
        data.test
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("test_{i:05}.png"), s.image.clone()))
            .collect()
    } else {
        image_paths
            .iter()
            .map(|p| {
                if !p.exists() {
                    return Err(CtaError::MissingArtifact(p.display().to_string()));
                }
                let img = image::open(p)?.to_rgb8();
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image.png".into());
                Ok((name, datagen::rgb8_to_image(&img)))
            })
            .collect::<Result<Vec<_>>>()?
    };

    for &eps in &config.attack.epsilons {
        let gen = load_generator_for(config, eps)?;
        let clean: Vec<Array3<f64>> = inputs.iter().map(|(_, img)| img.clone()).collect();
        let adv: Vec<Array3<f64>> = clean
            .iter()
            .map(|x| attack::apply_generator(&gen, x))
            .collect::<Result<Vec<_>>>()?;
        // verifier pass: every output must satisfy the ball bound before writing
        let batch = attack::AdversarialBatch::new(clean, adv, eps)?;

        let dir = config.adv_dir().join("cta").join(format!("eps{}", eps_tag(eps)));
        util::create_dir_all(&dir)?;
        let mut records = Vec::new();
        for ((name, _), (adv_img, linf)) in inputs
            .iter()
            .zip(batch.adversarial.iter().zip(&batch.per_image_linf))
        {
            let file = format!("adv_{name}");
            viz::save_image(&dir.join(&file), adv_img)?;
            records.push(LinfRecord {
                file,
                linf: crate::util::round4(*linf),
            });
        }
        util::write_jsonl(&dir.join("linf_manifest.jsonl"), &records)?;
        println!(
            "cta eps={}: wrote {} adversarial images to {}",
            eps_tag(eps),
            records.len(),
            dir.display()
        );
    }
    Ok(())
}

/// Evaluate all configured attacks and write report + figure data.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let data = load_dataset_checked(config)?;
    let bundle = load_bundle(config)?;

    let needs_generators = config.eval.attacks.contains(&AttackKind::Cta);
    let generators: Vec<Option<attack::PerturbationGenerator>> = config
        .attack
        .epsilons
        .iter()
        .map(|&eps| {
            if needs_generators {
                load_generator_for(config, eps).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_bytes = util::read_bytes(&config.dataset_dir().join("manifest.jsonl"))?;
    let dataset_id = util::sha256_hex(&manifest_bytes)[..12].to_string();

    let report = report::build_report(&ReportInputs {
        bundle: &bundle,
        samples: &data.test,
        attacks: &config.eval.attacks,
        epsilons: &config.attack.epsilons,
        generators: &generators,
        global_seed: config.seed,
        dr_steps: config.eval.dr_steps,
        dataset_id,
    })?;
    report.write_files(&config.reports_dir(), &config.figures_dir())?;
    println!("{}", report.to_table());
    println!("report written to {}", config.reports_dir().display());
    Ok(())
}

fn gray_png_as_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let map = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
    });
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        viz::jet(map[[y, x]])[c]
    }))
}

/// Per requested image: clean | co-attention | anti-attention | adversarial |
/// adversarial attention, plus any per-epoch snapshots the training kept.
pub fn cmd_visualize(config: &RunConfig, ids: &[usize]) -> Result<()> {
    config.validate()?;
    let data = load_dataset_checked(config)?;
    let bundle = load_bundle(config)?;
    let eps = config
        .attack
        .epsilons
        .iter()
        .copied()
        .fold(f64::NAN, f64::max);
    let eps = if eps.is_nan() {
        return Err(CtaError::Config("no epsilon configured".into()));
    } else {
        eps
    };
    let gen = load_generator_for(config, eps)?;

    let ids = if ids.is_empty() {
        config.visualize.image_ids.clone()
    } else {
        ids.to_vec()
    };

    for &id in &ids {
        let sample = data.test.get(id).ok_or_else(|| {
            CtaError::InvalidInput(format!(
                "image id {id} out of range (test split has {})",
                data.test.len()
            ))
        })?;
        let (co, anti) = attack::extract_co_anti(&bundle, &sample.image)?;
        let adv = attack::apply_generator(&gen, &sample.image)?;
        let adv_map = attack::adversarial_attention(bundle.extractor(), &adv)?;

        let mut panels = vec![
            sample.image.clone(),
            viz::overlay_heatmap(&sample.image, &co.values)?,
            viz::overlay_heatmap(&sample.image, &anti.values)?,
            adv.clone(),
            viz::overlay_heatmap(&adv, &adv_map.values)?,
        ];

        // append retained training snapshots in epoch order
        let gen_dir = config.generator_dir(eps);
        if let Ok(entries) = std::fs::read_dir(&gen_dir) {
            let mut snaps: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("snap_epoch_") && n.ends_with(".png"))
                })
                .collect();
            snaps.sort();
            for snap in snaps {
                panels.push(gray_png_as_rgb(&snap)?);
            }
        }

        let grid = viz::hstack(&panels, 2)?;
        let out = config.figures_dir().join(format!("viz_img{id:03}.png"));
        viz::save_image(&out, &grid)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
