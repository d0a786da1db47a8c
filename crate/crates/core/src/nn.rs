//! Layers, initialization, the Adam optimizer and weight (de)serialization.

use crate::error::{CtaError, Result};
use crate::tensor::{Arr, Graph, ValueId};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arr,
}

/// Anything holding an ordered list of trainable tensors. The order must
/// match the order in which `forward` registers them on a [`Graph`].
pub trait ParamModel {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

/// He-normal initialization for conv/linear weights.
pub fn he_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * normal_sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; platform-independent given the seeded stream.
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// 2-D convolution layer (square kernel, fixed stride/padding).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        Conv2dLayer {
            w: Param {
                name: format!("{name}.w"),
                value: he_normal(rng, &[cout, cin, k, k], fan_in),
            },
            b: Param {
                name: format!("{name}.b"),
                value: Arr::zeros(IxDyn(&[cout])),
            },
            stride,
            pad,
        }
    }

    /// Same shape as `new` but all-zero weights and bias, so the layer's
    /// output is identically zero until trained.
    pub fn new_zeroed(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            w: Param {
                name: format!("{name}.w"),
                value: Arr::zeros(IxDyn(&[cout, cin, k, k])),
            },
            b: Param {
                name: format!("{name}.b"),
                value: Arr::zeros(IxDyn(&[cout])),
            },
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: ValueId) -> ValueId {
        let w = g.param(self.w.value.clone());
        let b = g.param(self.b.value.clone());
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Forward without registering params as trainable (frozen model).
    pub fn forward_frozen(&self, g: &mut Graph, x: ValueId) -> ValueId {
        let w = g.constant(self.w.value.clone());
        let b = g.constant(self.b.value.clone());
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Param,
    pub b: Param,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha12Rng, name: &str, n_in: usize, n_out: usize) -> Self {
        LinearLayer {
            w: Param {
                name: format!("{name}.w"),
                value: he_normal(rng, &[n_out, n_in], n_in),
            },
            b: Param {
                name: format!("{name}.b"),
                value: Arr::zeros(IxDyn(&[n_out])),
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, x: ValueId) -> ValueId {
        let w = g.param(self.w.value.clone());
        let b = g.param(self.b.value.clone());
        g.linear(x, w, b)
    }

    pub fn forward_frozen(&self, g: &mut Graph, x: ValueId) -> ValueId {
        let w = g.constant(self.w.value.clone());
        let b = g.constant(self.b.value.clone());
        g.linear(x, w, b)
    }
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Arr::zeros(IxDyn(s))).collect(),
            v: shapes.iter().map(|s| Arr::zeros(IxDyn(s))).collect(),
        }
    }

    pub fn for_model(lr: f64, beta1: f64, beta2: f64, model: &impl ParamModel) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        Self::new(lr, beta1, beta2, &shapes)
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Arr]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer state mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Sum per-image gradient lists in index order (deterministic reduction).
pub fn sum_grads(per_image: Vec<Vec<Arr>>) -> Vec<Arr> {
    let mut iter = per_image.into_iter();
    let mut acc = iter.next().expect("at least one gradient set");
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(grads.into_iter()) {
            *a += &g;
        }
    }
    acc
}

const WEIGHTS_MAGIC: &[u8; 4] = b"CTAW";
const WEIGHTS_VERSION: u32 = 1;

/// Serialize params to the checkpoint byte format (name, shape, f64 LE data).
pub fn params_to_bytes(params: &[&Param]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse checkpoint bytes back into named tensors.
pub fn params_from_bytes(bytes: &[u8]) -> Result<Vec<Param>> {
    let err = |msg: &str| CtaError::InvalidInput(format!("weights blob: {msg}"));
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| err("truncated"))?;
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != WEIGHTS_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| err("non-utf8 name"))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let value = Arr::from_shape_vec(IxDyn(&shape), data).map_err(|_| err("bad shape"))?;
        params.push(Param { name, value });
    }
    Ok(params)
}

/// Copy loaded tensors into a model by name; errors on any mismatch.
pub fn load_into_model(model: &mut impl ParamModel, loaded: Vec<Param>) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != loaded.len() {
        return Err(CtaError::InvalidInput(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (slot, src) in params.iter_mut().zip(loaded.into_iter()) {
        if slot.name != src.name {
            return Err(CtaError::InvalidInput(format!(
                "checkpoint tensor '{}' does not match model tensor '{}'",
                src.name, slot.name
            )));
        }
        if slot.value.shape() != src.value.shape() {
            return Err(CtaError::InvalidInput(format!(
                "tensor '{}' shape mismatch",
                src.name
            )));
        }
        slot.value = src.value;
    }
    Ok(())
}

/// SHA-256 of a model's serialized weights; the frozen-model integrity check.
pub fn weights_hash(model: &impl ParamModel) -> String {
    crate::util::sha256_hex(&params_to_bytes(&model.params()))
}

pub fn save_weights(model: &impl ParamModel, path: &Path) -> Result<()> {
    crate::util::write_bytes(path, &params_to_bytes(&model.params()))
}

pub fn load_weights(model: &mut impl ParamModel, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CtaError::MissingArtifact(path.display().to_string()));
    }
    let bytes = crate::util::read_bytes(path)?;
    load_into_model(model, params_from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    struct Toy {
        a: Param,
        b: Param,
    }

    impl ParamModel for Toy {
        fn params(&self) -> Vec<&Param> {
            vec![&self.a, &self.b]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.a, &mut self.b]
        }
    }

    fn toy() -> Toy {
        Toy {
            a: Param {
                name: "a".into(),
                value: Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            },
            b: Param {
                name: "b".into(),
                value: Arr::from_shape_vec(IxDyn(&[3]), vec![-1.0, 0.5, 9.0]).unwrap(),
            },
        }
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let model = toy();
        let bytes = params_to_bytes(&model.params());
        let loaded = params_from_bytes(&bytes).unwrap();
        let mut fresh = Toy {
            a: Param {
                name: "a".into(),
                value: Arr::zeros(IxDyn(&[2, 2])),
            },
            b: Param {
                name: "b".into(),
                value: Arr::zeros(IxDyn(&[3])),
            },
        };
        load_into_model(&mut fresh, loaded).unwrap();
        assert_eq!(fresh.a.value, model.a.value);
        assert_eq!(fresh.b.value, model.b.value);
        assert_eq!(weights_hash(&fresh), weights_hash(&model));
    }

    #[test]
    fn corrupt_weights_rejected() {
        let model = toy();
        let mut bytes = params_to_bytes(&model.params());
        bytes[0] = b'X';
        assert!(params_from_bytes(&bytes).is_err());
        bytes.truncate(6);
        assert!(params_from_bytes(&bytes).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        // minimize f(p) = sum(p^2); gradient 2p.
        let mut model = toy();
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        let mut opt = Adam::new(0.1, 0.9, 0.999, &shapes);
        let start: f64 = model.params().iter().map(|p| p.value.mapv(|v| v * v).sum()).sum();
        for _ in 0..200 {
            let grads: Vec<Arr> = model.params().iter().map(|p| p.value.mapv(|v| 2.0 * v)).collect();
            opt.step(model.params_mut(), &grads);
        }
        let end: f64 = model.params().iter().map(|p| p.value.mapv(|v| v * v).sum()).sum();
        assert!(end < start * 1e-2, "{end} !<< {start}");
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let a = he_normal(&mut r1, &[4, 3], 3);
        let b = he_normal(&mut r2, &[4, 3], 3);
        assert_eq!(a, b);
    }

    #[test]
    fn sum_grads_fixed_order() {
        let g1 = vec![Arr::from_elem(IxDyn(&[2]), 1.0)];
        let g2 = vec![Arr::from_elem(IxDyn(&[2]), 2.0)];
        let total = sum_grads(vec![g1, g2]);
        assert_eq!(total[0], Arr::from_elem(IxDyn(&[2]), 3.0));
    }
}
