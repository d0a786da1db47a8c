//! Single-scale grid detector: classifier-style trunk plus three 1x1 heads
//! (objectness, box parameters, class scores), one box per cell.

use crate::metrics::{box_iou, DetPred};
use crate::nn::{Conv2dLayer, Param, ParamModel};
use crate::tensor::{Graph, ValueId};
use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha12Rng;

use super::{sigmoid, FeatureTap};

pub const DET_ARCH_ID: &str = "grid-det-v1";
pub const DET_TAP_ID: &str = "trunk4.relu";

#[derive(Debug, Clone)]
pub struct Detector {
    pub trunk: Vec<Conv2dLayer>,
    pub obj_head: Conv2dLayer,
    pub box_head: Conv2dLayer,
    pub cls_head: Conv2dLayer,
    pub image_size: usize,
    pub num_classes: usize,
}

pub struct DetForward {
    pub tap: ValueId,
    /// [1, S, S] objectness logits.
    pub obj: ValueId,
    /// [4, S, S] box parameter logits (tx, ty, tw, th).
    pub boxes: ValueId,
    /// [C, S, S] class logits.
    pub classes: ValueId,
}

/// Detector head outputs as arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct DetOutputs {
    pub obj: Array2<f64>,
    pub boxes: Array3<f64>,
    pub classes: Array3<f64>,
}

impl Detector {
    pub fn new(rng: &mut ChaCha12Rng, image_size: usize, num_classes: usize) -> Self {
        let trunk = vec![
            Conv2dLayer::new(rng, "trunk1", 3, 16, 3, 2, 1),
            Conv2dLayer::new(rng, "trunk2", 16, 32, 3, 2, 1),
            Conv2dLayer::new(rng, "trunk3", 32, 64, 3, 2, 1),
            Conv2dLayer::new(rng, "trunk4", 64, 64, 3, 1, 1),
        ];
        Detector {
            trunk,
            obj_head: Conv2dLayer::new(rng, "obj_head", 64, 1, 1, 1, 0),
            box_head: Conv2dLayer::new(rng, "box_head", 64, 4, 1, 1, 0),
            cls_head: Conv2dLayer::new(rng, "cls_head", 64, num_classes, 1, 1, 0),
            image_size,
            num_classes,
        }
    }

    /// Grid side (cells per image side).
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn tap(&self) -> FeatureTap {
        FeatureTap {
            layer_id: DET_TAP_ID.into(),
            feature_shape: (64, self.grid(), self.grid()),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: ValueId, trainable: bool) -> DetForward {
        let conv = |g: &mut Graph, layer: &Conv2dLayer, x: ValueId| {
            if trainable {
                layer.forward(g, x)
            } else {
                layer.forward_frozen(g, x)
            }
        };
        let mut h = x;
        for layer in &self.trunk {
            h = conv(g, layer, h);
            h = g.relu(h);
        }
        let tap = h;
        let obj = conv(g, &self.obj_head, tap);
        let boxes = conv(g, &self.box_head, tap);
        let classes = conv(g, &self.cls_head, tap);
        DetForward {
            tap,
            obj,
            boxes,
            classes,
        }
    }

    pub fn forward_arrays(&self, image: &Array3<f64>) -> (DetOutputs, Array3<f64>) {
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let fwd = self.forward(&mut g, x, false);
        let as3 = |id: ValueId, g: &Graph| {
            g.value(id)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("head output is CHW")
        };
        let obj3 = as3(fwd.obj, &g);
        let out = DetOutputs {
            obj: obj3.index_axis(Axis(0), 0).to_owned(),
            boxes: as3(fwd.boxes, &g),
            classes: as3(fwd.classes, &g),
        };
        let tap = as3(fwd.tap, &g);
        (out, tap)
    }

    /// Decode one cell into pixel box coordinates (exclusive max edges).
    pub fn decode_cell(&self, out: &DetOutputs, i: usize, j: usize) -> (f64, f64, f64, f64) {
        let cell = self.image_size as f64 / self.grid() as f64;
        let size = self.image_size as f64;
        let cx = (j as f64 + sigmoid(out.boxes[[0, i, j]])) * cell;
        let cy = (i as f64 + sigmoid(out.boxes[[1, i, j]])) * cell;
        let w = sigmoid(out.boxes[[2, i, j]]) * size;
        let h = sigmoid(out.boxes[[3, i, j]]) * size;
        (
            (cx - w / 2.0).clamp(0.0, size),
            (cy - h / 2.0).clamp(0.0, size),
            (cx + w / 2.0).clamp(0.0, size),
            (cy + h / 2.0).clamp(0.0, size),
        )
    }

    /// Threshold + per-class greedy NMS decoding.
    pub fn decode(&self, out: &DetOutputs, conf_threshold: f64, nms_iou: f64) -> Vec<DetPred> {
        let s = self.grid();
        let mut cands: Vec<DetPred> = Vec::new();
        for i in 0..s {
            for j in 0..s {
                let obj_p = sigmoid(out.obj[[i, j]]);
                // softmax over class logits for a calibrated confidence
                let mut m = f64::NEG_INFINITY;
                for c in 0..self.num_classes {
                    m = m.max(out.classes[[c, i, j]]);
                }
                let mut denom = 0.0;
                for c in 0..self.num_classes {
                    denom += (out.classes[[c, i, j]] - m).exp();
                }
                let mut best_c = 0;
                for c in 1..self.num_classes {
                    if out.classes[[c, i, j]] > out.classes[[best_c, i, j]] {
                        best_c = c;
                    }
                }
                let cls_p = (out.classes[[best_c, i, j]] - m).exp() / denom;
                let conf = obj_p * cls_p;
                if conf < conf_threshold {
                    continue;
                }
                let (x_min, y_min, x_max, y_max) = self.decode_cell(out, i, j);
                if x_max <= x_min || y_max <= y_min {
                    continue;
                }
                cands.push(DetPred {
                    class_id: best_c,
                    x_min,
                    y_min,
                    x_max,
                    y_max,
                    confidence: conf,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .expect("finite confidences")
        });
        let mut kept: Vec<DetPred> = Vec::new();
        for c in cands {
            let suppressed = kept.iter().any(|k| {
                k.class_id == c.class_id
                    && box_iou(
                        (k.x_min, k.y_min, k.x_max, k.y_max),
                        (c.x_min, c.y_min, c.x_max, c.y_max),
                    ) > nms_iou
            });
            if !suppressed {
                kept.push(c);
            }
        }
        kept
    }
}

impl ParamModel for Detector {
    fn params(&self) -> Vec<&Param> {
        let mut ps = Vec::new();
        for l in &self.trunk {
            ps.push(&l.w);
            ps.push(&l.b);
        }
        for l in [&self.obj_head, &self.box_head, &self.cls_head] {
            ps.push(&l.w);
            ps.push(&l.b);
        }
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for l in &mut self.trunk {
            ps.push(&mut l.w);
            ps.push(&mut l.b);
        }
        for l in [&mut self.obj_head, &mut self.box_head, &mut self.cls_head] {
            ps.push(&mut l.w);
            ps.push(&mut l.b);
        }
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
        let model = Detector::new(&mut rng, 64, 4);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.4);
        let mut g = Graph::new();
        let x = g.constant(image.into_dyn());
        let fwd = model.forward(&mut g, x, true);
        assert_eq!(g.value(fwd.obj).shape(), &[1, 8, 8]);
        assert_eq!(g.value(fwd.boxes).shape(), &[4, 8, 8]);
        assert_eq!(g.value(fwd.classes).shape(), &[4, 8, 8]);
        assert_eq!(g.param_ids().len(), model.params().len());
    }

    #[test]
    fn nms_keeps_highest_confidence_duplicate() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = Detector::new(&mut rng, 64, 4);
        let mk = |conf: f64| DetPred {
            class_id: 0,
            x_min: 10.0,
            y_min: 10.0,
            x_max: 30.0,
            y_max: 30.0,
            confidence: conf,
        };
        // feed the NMS path directly through decode() internals via a fake:
        // identical boxes at 0.9/0.8 -> keep only 0.9
        let mut kept: Vec<DetPred> = Vec::new();
        for c in [mk(0.9), mk(0.8)] {
            let suppressed = kept.iter().any(|k| {
                k.class_id == c.class_id
                    && box_iou(
                        (k.x_min, k.y_min, k.x_max, k.y_max),
                        (c.x_min, c.y_min, c.x_max, c.y_max),
                    ) > 0.45
            });
            if !suppressed {
                kept.push(c);
            }
        }
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        let _ = model;
    }

    #[test]
    fn decoded_boxes_stay_in_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = Detector::new(&mut rng, 64, 4);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.7);
        let (out, _) = model.forward_arrays(&image);
        for p in model.decode(&out, 0.0, 0.45) {
            assert!(p.x_min >= 0.0 && p.x_max <= 64.0 && p.x_min < p.x_max);
            assert!(p.y_min >= 0.0 && p.y_max <= 64.0 && p.y_min < p.y_max);
        }
    }
}
