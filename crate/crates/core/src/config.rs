//! Run configuration: one JSON file with defaults for every field, unknown
//! keys rejected, plus dotted-path `--set key=value` overrides.

use crate::attack::AttackConfig;
use crate::datagen::SceneSpec;
use crate::error::{CtaError, Result};
use crate::report::AttackKind;
use crate::util::stage_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub num_shapes_min: usize,
    pub num_shapes_max: usize,
    pub num_classes: usize,
    pub background: u32,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            num_shapes_min: 1,
            num_shapes_max: 3,
            num_classes: 4,
            background: 0,
            n_train: 256,
            n_test: 64,
        }
    }
}

impl DatasetConfig {
    /// Scene spec with the generation seed derived from the global seed.
    pub fn scene_spec(&self, global_seed: u64) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            num_shapes_min: self.num_shapes_min,
            num_shapes_max: self.num_shapes_max,
            num_classes: self.num_classes,
            background: self.background,
            rng_seed: stage_seed(global_seed, "datagen"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub classifier_epochs: usize,
    pub detector_epochs: usize,
    pub segmenter_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            classifier_epochs: 30,
            detector_epochs: 40,
            segmenter_epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackTrainConfig {
    /// One generator is trained per epsilon (normalized [0,1] units).
    pub epsilons: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub max_train_images: Option<usize>,
    pub snapshot_every: Option<usize>,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackTrainConfig {
            epsilons: vec![10.0 / 255.0, 16.0 / 255.0],
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            max_train_images: None,
            snapshot_every: Some(10),
        }
    }
}

impl AttackTrainConfig {
    /// Per-epsilon attack config; the training seed is split per epsilon.
    pub fn attack_config(&self, global_seed: u64, epsilon: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            seed: stage_seed(
                global_seed,
                &format!("attack/eps{}", crate::report::eps_tag(epsilon)),
            ),
            max_train_images: self.max_train_images,
            snapshot_every: self.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub attacks: Vec<AttackKind>,
    pub dr_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attacks: vec![
                AttackKind::Clean,
                AttackKind::GaussianNoise,
                AttackKind::Dr,
                AttackKind::Cta,
            ],
            dr_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub image_ids: Vec<usize>,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            image_ids: vec![0, 1, 2, 3],
        }
    }
}

/// The whole run configuration. `{}` is a valid config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub models: ModelsConfig,
    pub attack: AttackTrainConfig,
    pub eval: EvalConfig,
    pub visualize: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            models: ModelsConfig::default(),
            attack: AttackTrainConfig::default(),
            eval: EvalConfig::default(),
            visualize: VizConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene_spec(self.seed).validate()?;
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(CtaError::Config("n_train and n_test must be positive".into()));
        }
        if self.attack.epsilons.is_empty() {
            return Err(CtaError::Config("attack.epsilons must be nonempty".into()));
        }
        let mut tags: Vec<String> = self
            .attack
            .epsilons
            .iter()
            .map(|&e| crate::report::eps_tag(e))
            .collect();
        tags.sort();
        tags.dedup();
        if tags.len() != self.attack.epsilons.len() {
            return Err(CtaError::Config(
                "attack.epsilons collide at 8-bit resolution".into(),
            ));
        }
        for &e in &self.attack.epsilons {
            if !(e > 0.0 && e < 1.0) {
                return Err(CtaError::Config(format!("epsilon {e} outside (0,1)")));
            }
        }
        Ok(())
    }

    // output layout
    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }
    pub fn generators_dir(&self) -> PathBuf {
        self.out_dir.join("generators")
    }
    pub fn generator_dir(&self, epsilon: f64) -> PathBuf {
        self.generators_dir()
            .join(format!("eps{}", crate::report::eps_tag(epsilon)))
    }
    pub fn adv_dir(&self) -> PathBuf {
        self.out_dir.join("adv")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
    pub fn figures_dir(&self) -> PathBuf {
        self.out_dir.join("figures")
    }
}

/// Apply one `key=value` override onto a JSON tree. Values parse as JSON when
/// possible and fall back to strings, so `--set seed=3` and
/// `--set out_dir=run2` both work.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| CtaError::Config(format!("--set expects key=value, got '{spec}'")))?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CtaError::Config(format!(
                "--set path '{path}' crosses a non-object at '{part}'"
            )));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("path has at least one part");
}

/// Load a config file (defaults when `path` is None), apply overrides, and
/// reject unknown keys anywhere in the tree.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CtaError::Config(format!(
                    "config file {} does not exist",
                    p.display()
                )));
            }
            serde_json::from_str(&crate::util::read_string(p)?)
                .map_err(|e| CtaError::Config(format!("config parse: {e}")))?
        }
        None => serde_json::json!({}),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let config: RunConfig = serde_json::from_value(tree)
        .map_err(|e| CtaError::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}
