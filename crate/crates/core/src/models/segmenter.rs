//! Encoder-decoder segmenter with skip connections. The tap is the last
//! decoder feature layer before the 1x1 logits head.

use crate::nn::{Conv2dLayer, Param, ParamModel};
use crate::tensor::{Graph, ValueId};
use ndarray::Array3;
use rand_chacha::ChaCha12Rng;

use super::FeatureTap;

pub const SEG_ARCH_ID: &str = "unet-mini-v1";
pub const SEG_TAP_ID: &str = "fuse1.relu";

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub e1: Conv2dLayer,
    pub e2: Conv2dLayer,
    pub e3: Conv2dLayer,
    pub mid: Conv2dLayer,
    pub d2: Conv2dLayer,
    pub fuse2: Conv2dLayer,
    pub d1: Conv2dLayer,
    pub fuse1: Conv2dLayer,
    pub head: Conv2dLayer,
    pub image_size: usize,
    pub num_classes: usize,
}

pub struct SegForward {
    pub tap: ValueId,
    /// [num_classes + 1, H, W] logits; channel 0 is background.
    pub logits: ValueId,
}

impl Segmenter {
    pub fn new(rng: &mut ChaCha12Rng, image_size: usize, num_classes: usize) -> Self {
        Segmenter {
            e1: Conv2dLayer::new(rng, "e1", 3, 12, 3, 1, 1),
            e2: Conv2dLayer::new(rng, "e2", 12, 24, 3, 2, 1),
            e3: Conv2dLayer::new(rng, "e3", 24, 48, 3, 2, 1),
            mid: Conv2dLayer::new(rng, "mid", 48, 48, 3, 1, 1),
            d2: Conv2dLayer::new(rng, "d2", 48, 24, 3, 1, 1),
            fuse2: Conv2dLayer::new(rng, "fuse2", 48, 24, 3, 1, 1),
            d1: Conv2dLayer::new(rng, "d1", 24, 12, 3, 1, 1),
            fuse1: Conv2dLayer::new(rng, "fuse1", 24, 12, 3, 1, 1),
            head: Conv2dLayer::new(rng, "head", 12, num_classes + 1, 1, 1, 0),
            image_size,
            num_classes,
        }
    }

    pub fn tap(&self) -> FeatureTap {
        FeatureTap {
            layer_id: SEG_TAP_ID.into(),
            feature_shape: (12, self.image_size, self.image_size),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: ValueId, trainable: bool) -> SegForward {
        let conv = |g: &mut Graph, layer: &Conv2dLayer, x: ValueId| {
            if trainable {
                layer.forward(g, x)
            } else {
                layer.forward_frozen(g, x)
            }
        };
        let s1 = {
            let c = conv(g, &self.e1, x);
            g.relu(c)
        };
        let s2 = {
            let c = conv(g, &self.e2, s1);
            g.relu(c)
        };
        let bottom = {
            let c = conv(g, &self.e3, s2);
            g.relu(c)
        };
        let mid = {
            let c = conv(g, &self.mid, bottom);
            g.relu(c)
        };

        let up2 = g.upsample_nearest_2x(mid);
        let d2 = {
            let c = conv(g, &self.d2, up2);
            g.relu(c)
        };
        let cat2 = g.concat_channels(d2, s2);
        let f2 = {
            let c = conv(g, &self.fuse2, cat2);
            g.relu(c)
        };

        let up1 = g.upsample_nearest_2x(f2);
        let d1 = {
            let c = conv(g, &self.d1, up1);
            g.relu(c)
        };
        let cat1 = g.concat_channels(d1, s1);
        let tap = {
            let c = conv(g, &self.fuse1, cat1);
            g.relu(c)
        };

        let logits = conv(g, &self.head, tap);
        SegForward { tap, logits }
    }

    /// Plain-array forward: (logits [C+1,H,W], tap features).
    pub fn forward_arrays(&self, image: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let fwd = self.forward(&mut g, x, false);
        let logits = g
            .value(fwd.logits)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("seg logits are CHW");
        let tap = g
            .value(fwd.tap)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("tap is CHW");
        (logits, tap)
    }
}

impl ParamModel for Segmenter {
    fn params(&self) -> Vec<&Param> {
        [
            &self.e1, &self.e2, &self.e3, &self.mid, &self.d2, &self.fuse2, &self.d1,
            &self.fuse1, &self.head,
        ]
        .into_iter()
        .flat_map(|l| [&l.w, &l.b])
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [
            &mut self.e1,
            &mut self.e2,
            &mut self.e3,
            &mut self.mid,
            &mut self.d2,
            &mut self.fuse2,
            &mut self.d1,
            &mut self.fuse1,
            &mut self.head,
        ]
        .into_iter()
        .flat_map(|l| [&mut l.w, &mut l.b])
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_and_param_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = Segmenter::new(&mut rng, 64, 4);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.3);
        let mut g = Graph::new();
        let x = g.constant(image.into_dyn());
        let fwd = model.forward(&mut g, x, true);
        assert_eq!(g.value(fwd.logits).shape(), &[5, 64, 64]);
        assert_eq!(g.value(fwd.tap).shape(), &[12, 64, 64]);
        assert_eq!(g.param_ids().len(), model.params().len());
        for (id, p) in g.param_ids().iter().zip(model.params()) {
            assert_eq!(g.value(*id).shape(), p.value.shape());
        }
    }
}
