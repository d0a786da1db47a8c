//! Conv classifier: four conv blocks, global average pooling, linear head.
//! The tap is the post-ReLU output of the last block.

use crate::nn::{Conv2dLayer, LinearLayer, Param, ParamModel};
use crate::tensor::{Graph, ValueId};
use ndarray::{Array1, Array3};
use rand_chacha::ChaCha12Rng;

use super::FeatureTap;

pub const CLS_ARCH_ID: &str = "cls4-gap-v1";
pub const CLS_TAP_ID: &str = "block4.relu";

#[derive(Debug, Clone)]
pub struct Classifier {
    pub blocks: Vec<Conv2dLayer>,
    pub head: LinearLayer,
    pub image_size: usize,
    pub num_classes: usize,
}

/// Graph handles produced by a classifier forward pass.
pub struct ClsForward {
    pub tap: ValueId,
    pub logits: ValueId,
}

impl Classifier {
    pub fn new(rng: &mut ChaCha12Rng, image_size: usize, num_classes: usize) -> Self {
        let blocks = vec![
            Conv2dLayer::new(rng, "block1", 3, 16, 3, 2, 1),
            Conv2dLayer::new(rng, "block2", 16, 32, 3, 2, 1),
            Conv2dLayer::new(rng, "block3", 32, 64, 3, 2, 1),
            Conv2dLayer::new(rng, "block4", 64, 64, 3, 1, 1),
        ];
        let head = LinearLayer::new(rng, "head", 64, num_classes);
        Classifier {
            blocks,
            head,
            image_size,
            num_classes,
        }
    }

    /// Spatial side of the tap feature map.
    pub fn tap_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn tap(&self) -> FeatureTap {
        FeatureTap {
            layer_id: CLS_TAP_ID.into(),
            feature_shape: (64, self.tap_side(), self.tap_side()),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: ValueId, trainable: bool) -> ClsForward {
        let mut h = x;
        for block in &self.blocks {
            h = if trainable {
                block.forward(g, h)
            } else {
                block.forward_frozen(g, h)
            };
            h = g.relu(h);
        }
        let tap = h;
        let logits = self.head_from_tap(g, tap, trainable);
        ClsForward { tap, logits }
    }

    /// Head applied to tap features: GAP then the linear layer. Shared by the
    /// full forward pass and by feature-space probes.
    pub fn head_from_tap(&self, g: &mut Graph, tap: ValueId, trainable: bool) -> ValueId {
        let pooled = g.global_avg_pool(tap);
        if trainable {
            self.head.forward(g, pooled)
        } else {
            self.head.forward_frozen(g, pooled)
        }
    }

    /// Plain-array forward: (logits, tap features).
    pub fn forward_arrays(&self, image: &Array3<f64>) -> (Array1<f64>, Array3<f64>) {
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let fwd = self.forward(&mut g, x, false);
        let logits = g
            .value(fwd.logits)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("logits are 1-D");
        let tap = g
            .value(fwd.tap)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("tap is CHW");
        (logits, tap)
    }
}

impl ParamModel for Classifier {
    fn params(&self) -> Vec<&Param> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            ps.push(&b.w);
            ps.push(&b.b);
        }
        ps.push(&self.head.w);
        ps.push(&self.head.b);
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for b in &mut self.blocks {
            ps.push(&mut b.w);
            ps.push(&mut b.b);
        }
        ps.push(&mut self.head.w);
        ps.push(&mut self.head.b);
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_and_param_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = Classifier::new(&mut rng, 64, 4);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.5);
        let mut g = Graph::new();
        let x = g.constant(image.into_dyn());
        let fwd = model.forward(&mut g, x, true);
        assert_eq!(g.value(fwd.tap).shape(), &[64, 8, 8]);
        assert_eq!(g.value(fwd.logits).shape(), &[4]);
        // params registered on the graph in the same order as params()
        assert_eq!(g.param_ids().len(), model.params().len());
        for (id, p) in g.param_ids().iter().zip(model.params()) {
            assert_eq!(g.value(*id).shape(), p.value.shape());
        }
    }
}
