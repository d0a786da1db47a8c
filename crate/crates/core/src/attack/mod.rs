//! Attack stage: perturbation generator, epsilon-ball clipping, the
//! self-supervised attention-shift training loop, and the Gaussian-noise and
//! dispersion-reduction baselines.

mod generator;
mod trainer;

pub use generator::{
    load_generator, save_generator, GeneratorMeta, PerturbationGenerator, GEN_ARCH_ID,
    GEN_META_FILE, GEN_WEIGHTS_FILE,
};
pub use trainer::{
    adversarial_attention, adversarial_attention_node, apply_generator, cta_image_loss, cta_loss,
    extract_co_anti, train_cta, EpochRecord, TrainLog,
};

use crate::error::{CtaError, Result};
use crate::models::Classifier;
use crate::tensor::{scalar_value, Graph};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Hyperparameters for attack training (epsilon in normalized [0,1] units).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Training epochs (T).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// Cap on the number of training images (None = use all).
    pub max_train_images: Option<usize>,
    /// Keep an attention snapshot of the first image every N epochs.
    pub snapshot_every: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            seed: 0,
            max_train_images: None,
            snapshot_every: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(CtaError::Config(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        if self.epochs == 0 {
            return Err(CtaError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CtaError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pixelwise clip of `x_prime` into the epsilon ball around `x`, then into
/// the valid [0,1] range: min(x+eps, max(x', x-eps)).
pub fn clip_adversarial(x: &Array3<f64>, x_prime: &Array3<f64>, epsilon: f64) -> Result<Array3<f64>> {
    if epsilon <= 0.0 {
        return Err(CtaError::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if x.dim() != x_prime.dim() {
        return Err(CtaError::InvalidInput(format!(
            "clip shape mismatch: {:?} vs {:?}",
            x.dim(),
            x_prime.dim()
        )));
    }
    Ok(ndarray::Zip::from(x)
        .and(x_prime)
        .map_collect(|&xv, &xpv| (xv + epsilon).min(xpv.max(xv - epsilon)).clamp(0.0, 1.0)))
}

/// Largest absolute pixel difference.
pub fn linf_distance(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Clean/adversarial image pairs with their per-image distances.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub clean: Vec<Array3<f64>>,
    pub adversarial: Vec<Array3<f64>>,
    pub per_image_linf: Vec<f64>,
}

impl AdversarialBatch {
    pub fn new(clean: Vec<Array3<f64>>, adversarial: Vec<Array3<f64>>, epsilon: f64) -> Result<Self> {
        if clean.len() != adversarial.len() {
            return Err(CtaError::InvalidInput(
                "clean/adversarial length mismatch".into(),
            ));
        }
        let per_image_linf: Vec<f64> = clean
            .iter()
            .zip(&adversarial)
            .map(|(c, a)| linf_distance(c, a))
            .collect();
        for (i, (&d, adv)) in per_image_linf.iter().zip(&adversarial).enumerate() {
            if d > epsilon + 1e-6 {
                return Err(CtaError::InvalidInput(format!(
                    "image {i}: linf {d} exceeds epsilon {epsilon}"
                )));
            }
            if adv.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CtaError::InvalidInput(format!(
                    "image {i}: adversarial values out of [0,1]"
                )));
            }
        }
        Ok(AdversarialBatch {
            clean,
            adversarial,
            per_image_linf,
        })
    }
}

/// Gaussian baseline: per-pixel Normal(0, (eps/2)^2) noise, then clipping.
pub fn gaussian_noise_attack(x: &Array3<f64>, epsilon: f64, seed: u64) -> Result<Array3<f64>> {
    if epsilon <= 0.0 {
        return Err(CtaError::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, epsilon / 2.0).expect("valid sigma");
    let mut x_prime = x.clone();
    // row-major traversal gives one deterministic noise stream per seed
    for v in x_prime.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    clip_adversarial(x, &x_prime, epsilon)
}

/// Dispersion reduction: sign-step gradient descent on the standard deviation
/// of the classifier's tap features, projected into the epsilon ball after
/// every step.
pub fn dr_attack(
    x: &Array3<f64>,
    model: &Classifier,
    steps: usize,
    step_size: f64,
    epsilon: f64,
) -> Result<Array3<f64>> {
    if epsilon <= 0.0 {
        return Err(CtaError::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut current = x.clone();
    for step in 0..steps {
        let mut g = Graph::new();
        let leaf = g.leaf_with_grad(current.clone().into_dyn());
        let fwd = model.forward(&mut g, leaf, false);
        // std(F) = sqrt(mean((F - mean F)^2))
        let mean = g.mean_all(fwd.tap);
        let centered = g.sub_scalar_node(fwd.tap, mean);
        let sq = g.mul(centered, centered);
        let var = g.mean_all(sq);
        let std = g.sqrt(var);
        if !scalar_value(g.value(std)).is_finite() {
            return Err(CtaError::NonFinite(format!(
                "dispersion objective at step {step}"
            )));
        }
        let grads = g.backward(std);
        let grad = grads
            .get_or_zeros(&g, leaf)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("image grad is CHW");
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(CtaError::NonFinite(format!("dispersion gradient at step {step}")));
        }
        let stepped = ndarray::Zip::from(&current)
            .and(&grad)
            .map_collect(|&v, &dg| v - step_size * dg.signum());
        current = clip_adversarial(x, &stepped, epsilon)?;
    }
    Ok(current)
}

/// Feature standard deviation at the classifier tap (the DR objective).
pub fn feature_std(model: &Classifier, image: &Array3<f64>) -> f64 {
    let (_, tap) = model.forward_arrays(image);
    let n = tap.len() as f64;
    let mean = tap.sum() / n;
    (tap.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn probe_image(seed: u64) -> Array3<f64> {
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
    fn clip_direct_evaluation() {
        // x=0.5, x'=0.9, eps=0.1 -> 0.6
        let x = arr3(&[[[0.5]]]);
        let xp = arr3(&[[[0.9]]]);
        let out = clip_adversarial(&x, &xp, 0.1).unwrap();
        assert!((out[[0, 0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn clip_boundary_composition() {
        // x=0.05, x'=-0.3, eps=0.1 -> ball clip -0.05, range clamp 0.0
        let x = arr3(&[[[0.05]]]);
        let xp = arr3(&[[[-0.3]]]);
        let out = clip_adversarial(&x, &xp, 0.1).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.0);
    }

    #[test]
    fn clip_identity_and_idempotence() {
        let x = probe_image(1);
        for eps in [0.01, 0.1, 0.5] {
            let out = clip_adversarial(&x, &x, eps).unwrap();
            assert_eq!(out, x, "clip(x, x, eps) == x");
        }
        let xp = probe_image(2);
        let once = clip_adversarial(&x, &xp, 0.05).unwrap();
        let twice = clip_adversarial(&x, &once, 0.05).unwrap();
        assert_eq!(once, twice, "clip must be idempotent");
    }

    #[test]
    fn clip_rejects_bad_epsilon() {
        let x = arr3(&[[[0.5]]]);
        assert!(clip_adversarial(&x, &x, 0.0).is_err());
        assert!(clip_adversarial(&x, &x, -1.0).is_err());
    }

    #[test]
    fn gaussian_attack_contracts() {
        let x = probe_image(3);
        let eps = 16.0 / 255.0;
        let a = gaussian_noise_attack(&x, eps, 7).unwrap();
        let b = gaussian_noise_attack(&x, eps, 7).unwrap();
        assert_eq!(a, b, "same seed must give identical noise");
        let c = gaussian_noise_attack(&x, eps, 8).unwrap();
        assert_ne!(a, c);
        assert!(linf_distance(&a, &x) <= eps + 1e-12);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // tiny epsilon converges to the clean image
        let tiny = gaussian_noise_attack(&x, 1e-9, 7).unwrap();
        assert!(linf_distance(&tiny, &x) <= 1e-9 + 1e-15);
    }

    #[test]
    fn dr_attack_zero_steps_is_identity() {
        let x = probe_image(4);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = Classifier::new(&mut rng, 64, 4);
        let out = dr_attack(&x, &model, 0, 0.01, 0.1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dr_attack_reduces_feature_std_and_respects_ball() {
        let x = probe_image(5);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = Classifier::new(&mut rng, 64, 4);
        let eps = 16.0 / 255.0;
        let adv = dr_attack(&x, &model, 10, eps / 10.0, eps).unwrap();
        assert!(linf_distance(&adv, &x) <= eps + 1e-9);
        assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let before = feature_std(&model, &x);
        let after = feature_std(&model, &adv);
        assert!(
            after < before,
            "dispersion must drop: {before} -> {after}"
        );
    }

    #[test]
    fn adversarial_batch_validates_ball() {
        let x = probe_image(6);
        let eps = 0.05;
        let good = gaussian_noise_attack(&x, eps, 1).unwrap();
        assert!(AdversarialBatch::new(vec![x.clone()], vec![good], eps).is_ok());
        let bad = x.mapv(|v| (v + 0.2).min(1.0));
        assert!(AdversarialBatch::new(vec![x], vec![bad], eps).is_err());
    }

    #[test]
    fn attack_config_validation() {
        let mut c = AttackConfig::default();
        assert!(c.validate().is_ok());
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        c.epsilon = 1.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
