//! Image-conditioned perturbation generator: residual encoder-decoder with a
//! tanh output scaled to the training epsilon, so the raw perturbation is
//! range-bounded by construction. The final conv starts zeroed, making the
//! untrained generator the identity (delta = 0).

use crate::error::{CtaError, Result};
use crate::nn::{Conv2dLayer, Param, ParamModel};
use crate::tensor::{Graph, ValueId};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const GEN_ARCH_ID: &str = "resgen-32-64-128x4-v1";

#[derive(Debug, Clone)]
pub struct PerturbationGenerator {
    pub stem: Conv2dLayer,
    pub down1: Conv2dLayer,
    pub down2: Conv2dLayer,
    pub res: Vec<(Conv2dLayer, Conv2dLayer)>,
    pub up1: Conv2dLayer,
    pub up2: Conv2dLayer,
    pub out: Conv2dLayer,
    pub epsilon_train: f64,
    pub image_size: usize,
}

impl PerturbationGenerator {
    pub fn new(seed: u64, image_size: usize, epsilon_train: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon_train) || epsilon_train <= 0.0 {
            return Err(CtaError::Config(format!(
                "epsilon must lie in (0,1), got {epsilon_train}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let res = (0..4)
            .map(|i| {
                (
                    Conv2dLayer::new(&mut rng, &format!("res{i}a"), 128, 128, 3, 1, 1),
                    Conv2dLayer::new(&mut rng, &format!("res{i}b"), 128, 128, 3, 1, 1),
                )
            })
            .collect();
        Ok(PerturbationGenerator {
            stem: Conv2dLayer::new(&mut rng, "stem", 3, 32, 7, 1, 3),
            down1: Conv2dLayer::new(&mut rng, "down1", 32, 64, 3, 2, 1),
            down2: Conv2dLayer::new(&mut rng, "down2", 64, 128, 3, 2, 1),
            res,
            up1: Conv2dLayer::new(&mut rng, "up1", 128, 64, 3, 1, 1),
            up2: Conv2dLayer::new(&mut rng, "up2", 64, 32, 3, 1, 1),
            out: Conv2dLayer::new_zeroed("out", 32, 3, 7, 1, 3),
            epsilon_train,
            image_size,
        })
    }

    /// Graph forward producing the bounded perturbation delta = eps*tanh(...).
    pub fn forward(&self, g: &mut Graph, x: ValueId, trainable: bool) -> ValueId {
        let conv = |g: &mut Graph, layer: &Conv2dLayer, x: ValueId| {
            if trainable {
                layer.forward(g, x)
            } else {
                layer.forward_frozen(g, x)
            }
        };
        let mut h = {
            let c = conv(g, &self.stem, x);
            g.relu(c)
        };
        h = {
            let c = conv(g, &self.down1, h);
            g.relu(c)
        };
        h = {
            let c = conv(g, &self.down2, h);
            g.relu(c)
        };
        for (a, b) in &self.res {
            let skip = h;
            let c1 = conv(g, a, h);
            let r1 = g.relu(c1);
            let c2 = conv(g, b, r1);
            h = g.add(skip, c2);
        }
        h = {
            let u = g.upsample_nearest_2x(h);
            let c = conv(g, &self.up1, u);
            g.relu(c)
        };
        h = {
            let u = g.upsample_nearest_2x(h);
            let c = conv(g, &self.up2, u);
            g.relu(c)
        };
        let raw = conv(g, &self.out, h);
        let bounded = g.tanh(raw);
        g.scale(bounded, self.epsilon_train)
    }

    /// Pure application path: (delta, x + delta). No gradients, no updates.
    pub fn apply(&self, image: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        if image.dim() != (3, self.image_size, self.image_size) {
            return Err(CtaError::InvalidInput(format!(
                "generator expects [3,{0},{0}] images, got {1:?}",
                self.image_size,
                image.dim()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let delta_id = self.forward(&mut g, x, false);
        let delta = g
            .value(delta_id)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("delta is CHW");
        let x_prime = image + &delta;
        Ok((delta, x_prime))
    }
}

impl ParamModel for PerturbationGenerator {
    fn params(&self) -> Vec<&Param> {
        let mut layers: Vec<&Conv2dLayer> = vec![&self.stem, &self.down1, &self.down2];
        for (a, b) in &self.res {
            layers.push(a);
            layers.push(b);
        }
        layers.push(&self.up1);
        layers.push(&self.up2);
        layers.push(&self.out);
        layers.into_iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut layers: Vec<&mut Conv2dLayer> = vec![&mut self.stem, &mut self.down1, &mut self.down2];
        for (a, b) in &mut self.res {
            layers.push(a);
            layers.push(b);
        }
        layers.push(&mut self.up1);
        layers.push(&mut self.up2);
        layers.push(&mut self.out);
        layers.into_iter().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

/// Generator checkpoint metadata (`generator.json`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorMeta {
    pub epsilon: f64,
    pub config: super::AttackConfig,
    pub final_loss: f64,
    pub train_seed: u64,
    pub image_size: usize,
}

pub const GEN_WEIGHTS_FILE: &str = "weights.bin";
pub const GEN_META_FILE: &str = "generator.json";

pub fn save_generator(dir: &Path, gen: &PerturbationGenerator, meta: &GeneratorMeta) -> Result<()> {
    crate::util::create_dir_all(dir)?;
    crate::nn::save_weights(gen, &dir.join(GEN_WEIGHTS_FILE))?;
    let json = serde_json::to_string_pretty(meta)?;
    crate::util::write_bytes(&dir.join(GEN_META_FILE), json.as_bytes())
}

pub fn load_generator(dir: &Path) -> Result<(PerturbationGenerator, GeneratorMeta)> {
    let meta_path = dir.join(GEN_META_FILE);
    if !meta_path.exists() {
        return Err(CtaError::MissingArtifact(format!(
            "generator(epsilon=?) at {}",
            dir.display()
        )));
    }
    let meta: GeneratorMeta = serde_json::from_str(&crate::util::read_string(&meta_path)?)?;
    let mut gen = PerturbationGenerator::new(0, meta.image_size, meta.epsilon)?;
    crate::nn::load_weights(&mut gen, &dir.join(GEN_WEIGHTS_FILE))?;
    Ok((gen, meta))
}
