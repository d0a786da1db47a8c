//! Eager reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Graph`] is a per-sample Wengert tape: builder methods evaluate each
//! operation immediately (so data-dependent choices like argmax class
//! selection can inspect values mid-construction) and record enough to replay
//! the chain rule in reverse. Tensors are `f64` everywhere; images and
//! feature maps are CHW.

mod conv;
mod interp;

pub use conv::{col2im, conv2d_backward, conv2d_forward, conv_out_len, im2col};
pub use interp::{bilinear_taps, upsample_bilinear_2d, upsample_bilinear_2d_backward};

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Dynamic-rank f64 tensor.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// 0-dim scalar tensor.
pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Extract the value of a 0-dim (or single-element) tensor.
pub fn scalar_value(a: &Arr) -> f64 {
    *a.iter().next().expect("scalar tensor is non-empty")
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    MulConst(ValueId, Arr),
    Relu(ValueId),
    LeakyRelu(ValueId, f64),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Sqrt(ValueId),
    ElemMin(ValueId, ValueId),
    ElemMax(ValueId, ValueId),
    ClampScalar(ValueId, f64, f64),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    GlobalAvgPool(ValueId),
    UpsampleNearest2x(ValueId),
    UpsampleBilinear {
        x: ValueId,
        th: usize,
        tw: usize,
    },
    ConcatChannels(ValueId, ValueId),
    SliceSpatial {
        x: ValueId,
        row: usize,
        col: usize,
    },
    Index(ValueId, usize),
    SumAll(ValueId),
    MeanAll(ValueId),
    MinAll(ValueId),
    MaxAll(ValueId),
    SubScalarNode {
        a: ValueId,
        s: ValueId,
    },
    DivScalarNode {
        a: ValueId,
        s: ValueId,
    },
    ChannelWeightedSum {
        x: ValueId,
        weights: Array1<f64>,
    },
    SelectArgmaxChannels(ValueId),
    SoftmaxCrossEntropy {
        logits: ValueId,
        target: usize,
    },
    SpatialSoftmaxCrossEntropy {
        logits: ValueId,
        targets: Array2<usize>,
    },
    BceMean {
        logits: ValueId,
        targets: Arr,
        weights: Arr,
    },
    Mse(ValueId, ValueId),
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Per-sample computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ValueId>,
}

/// Gradients of one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    by_id: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Arr> {
        self.by_id[id.0].as_ref()
    }

    /// Gradient of a node, zeros if it never received one.
    pub fn get_or_zeros(&self, g: &Graph, id: ValueId) -> Arr {
        match self.by_id[id.0] {
            Some(ref a) => a.clone(),
            None => Arr::zeros(g.value(id).raw_dim()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: ValueId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Arr) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (attack inputs, probes).
    pub fn leaf_with_grad(&mut self, value: Arr) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable-parameter leaf; registered for [`Graph::param_ids`] in
    /// insertion order so optimizers can pair gradients with model params.
    pub fn param(&mut self, value: Arr) -> ValueId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push(id);
        id
    }

    pub fn param_ids(&self) -> &[ValueId] {
        &self.params
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = self.value(a).mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn mul_const(&mut self, a: ValueId, c: Arr) -> ValueId {
        let v = self.value(a) * &c;
        let ng = self.needs(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: ValueId, alpha: f64) -> ValueId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, alpha), ng)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn elem_min(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ElemMin(a, b), ng)
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn elem_max(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ElemMax(a, b), ng)
    }

    /// Clamp to `[lo, hi]`; gradient passes on the closed interval.
    pub fn clamp_scalar(&mut self, a: ValueId, lo: f64, hi: f64) -> ValueId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::ClampScalar(a, lo, hi), ng)
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv2d input is CHW");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d weight is [cout,cin,kh,kw]");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d bias is 1-D")
            .to_owned();
        let out = conv2d_forward(&xv, &wv, &bv, stride, pad).into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear input is 1-D");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight is 2-D");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear bias is 1-D");
        let out = (wv.dot(&xv) + bv).into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// [C,h,w] -> [C] spatial mean.
    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("gap input is CHW");
        let (c, h, w) = xv.dim();
        let mut out = Array1::<f64>::zeros(c);
        for k in 0..c {
            out[k] = xv.index_axis(Axis(0), k).sum() / (h * w) as f64;
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), ng)
    }

    pub fn upsample_nearest_2x(&mut self, x: ValueId) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("upsample input is CHW");
        let (c, h, w) = xv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((c, h * 2, w * 2));
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[k, i, j]];
                    out[[k, 2 * i, 2 * j]] = v;
                    out[[k, 2 * i, 2 * j + 1]] = v;
                    out[[k, 2 * i + 1, 2 * j]] = v;
                    out[[k, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2x(x), ng)
    }

    /// Bilinear resample of a [h,w] map to [th,tw] (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: ValueId, th: usize, tw: usize) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("bilinear input is 2-D");
        let out = upsample_bilinear_2d(&xv, th, tw).into_dyn();
        let ng = self.needs(x);
        self.push(out, Op::UpsampleBilinear { x, th, tw }, ng)
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("concat input is CHW");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("concat input is CHW");
        assert_eq!(av.dim().1, bv.dim().1, "concat: height mismatch");
        assert_eq!(av.dim().2, bv.dim().2, "concat: width mismatch");
        let out = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat channels");
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::ConcatChannels(a, b), ng)
    }

    /// [C,H,W] -> [C] channel fiber at one spatial position.
    pub fn slice_spatial(&mut self, x: ValueId, row: usize, col: usize) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("slice input is CHW");
        let out = xv.slice(ndarray::s![.., row, col]).to_owned().into_dyn();
        let ng = self.needs(x);
        self.push(out, Op::SliceSpatial { x, row, col }, ng)
    }

    /// Select one element by flat (row-major) index -> 0-dim scalar.
    pub fn index(&mut self, x: ValueId, flat: usize) -> ValueId {
        let v = *self
            .value(x)
            .as_slice()
            .expect("index input is standard layout")
            .get(flat)
            .expect("index in bounds");
        let ng = self.needs(x);
        self.push(scalar(v), Op::Index(x, flat), ng)
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let v = scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let v = scalar(self.value(x).sum() / self.value(x).len() as f64);
        let ng = self.needs(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Minimum over all elements; subgradient routed to the first minimizer.
    pub fn min_all(&mut self, x: ValueId) -> ValueId {
        let v = scalar(self.value(x).iter().copied().fold(f64::INFINITY, f64::min));
        let ng = self.needs(x);
        self.push(v, Op::MinAll(x), ng)
    }

    /// Maximum over all elements; subgradient routed to the first maximizer.
    pub fn max_all(&mut self, x: ValueId) -> ValueId {
        let v = scalar(
            self.value(x)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        );
        let ng = self.needs(x);
        self.push(v, Op::MaxAll(x), ng)
    }

    /// Broadcast-subtract a 0-dim node: out = a - s.
    pub fn sub_scalar_node(&mut self, a: ValueId, s: ValueId) -> ValueId {
        let sv = scalar_value(self.value(s));
        let v = self.value(a).mapv(|x| x - sv);
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::SubScalarNode { a, s }, ng)
    }

    /// Broadcast-divide by a 0-dim node: out = a / s.
    pub fn div_scalar_node(&mut self, a: ValueId, s: ValueId) -> ValueId {
        let sv = scalar_value(self.value(s));
        let v = self.value(a).mapv(|x| x / sv);
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::DivScalarNode { a, s }, ng)
    }

    /// [K,h,w] with constant per-channel weights -> [h,w] weighted sum.
    pub fn channel_weighted_sum(&mut self, x: ValueId, weights: Array1<f64>) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("weighted sum input is CHW");
        let (k, h, w) = xv.dim();
        assert_eq!(k, weights.len(), "weight/channel count mismatch");
        let mut out = Array2::<f64>::zeros((h, w));
        for c in 0..k {
            out.scaled_add(weights[c], &xv.index_axis(Axis(0), c));
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::ChannelWeightedSum { x, weights }, ng)
    }

    /// [C,H,W] -> [H,W]: per pixel, the value of the argmax channel
    /// (ties broken toward the lowest channel id).
    pub fn select_argmax_channels(&mut self, x: ValueId) -> ValueId {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("argmax select input is CHW");
        let (_, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let c = argmax_channel(&xv, i, j);
                out[[i, j]] = xv[[c, i, j]];
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::SelectArgmaxChannels(x), ng)
    }

    /// Numerically stable softmax cross-entropy on a logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, target: usize) -> ValueId {
        let z = self
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("ce logits are 1-D");
        assert!(target < z.len(), "ce target class in range");
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let ng = self.needs(logits);
        self.push(scalar(loss), Op::SoftmaxCrossEntropy { logits, target }, ng)
    }

    /// Mean per-pixel softmax cross-entropy over a [C,H,W] logit map.
    pub fn spatial_softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Array2<usize>,
    ) -> ValueId {
        let z = self
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("spatial ce logits are CHW");
        let (c, h, w) = z.dim();
        assert_eq!((h, w), targets.dim(), "spatial ce target shape");
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let t = targets[[i, j]];
                assert!(t < c, "spatial ce target class in range");
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(z[[k, i, j]]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    s += (z[[k, i, j]] - m).exp();
                }
                total += m + s.ln() - z[[t, i, j]];
            }
        }
        let loss = total / (h * w) as f64;
        let ng = self.needs(logits);
        self.push(
            scalar(loss),
            Op::SpatialSoftmaxCrossEntropy { logits, targets },
            ng,
        )
    }

    /// Weighted mean binary cross-entropy with logits.
    pub fn bce_mean(&mut self, logits: ValueId, targets: Arr, weights: Arr) -> ValueId {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape");
        assert_eq!(z.shape(), weights.shape(), "bce weight shape");
        let n = z.len() as f64;
        let mut total = 0.0;
        for ((&zv, &tv), &wv) in z.iter().zip(targets.iter()).zip(weights.iter()) {
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            total += wv * (zv.max(0.0) - zv * tv + (-zv.abs()).exp().ln_1p());
        }
        let loss = total / n;
        let ng = self.needs(logits);
        self.push(
            scalar(loss),
            Op::BceMean {
                logits,
                targets,
                weights,
            },
            ng,
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.len() as f64;
        let loss = av
            .iter()
            .zip(bv.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.needs(a) || self.needs(b);
        self.push(scalar(loss), Op::Mse(a, b), ng)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// on a path from a grad-tracked leaf to the root.
    pub fn backward(&self, root: ValueId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.value(root).raw_dim()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("grad present");
            self.backward_node(ValueId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_id: grads }
    }

    fn accum(&self, grads: &mut [Option<Arr>], id: ValueId, delta: Arr) {
        if !self.needs(id) {
            return;
        }
        match grads[id.0] {
            Some(ref mut g) => *g += &delta,
            None => grads[id.0] = Some(delta),
        }
    }

    fn backward_node(&self, id: ValueId, g: &Arr, grads: &mut [Option<Arr>]) {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g * self.value(*b));
                self.accum(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.mapv(|v| v * c)),
            Op::MulConst(a, c) => self.accum(grads, *a, g * c),
            Op::Relu(a) => {
                let mask = self.value(id).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, alpha) => {
                let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { *alpha });
                self.accum(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let t = self.value(id);
                self.accum(grads, *a, g * &t.mapv(|v| 1.0 - v * v));
            }
            Op::Sigmoid(a) => {
                let s = self.value(id);
                self.accum(grads, *a, g * &s.mapv(|v| v * (1.0 - v)));
            }
            Op::Sqrt(a) => {
                let r = self.value(id);
                let d = ndarray::Zip::from(g)
                    .and(r)
                    .map_collect(|&gv, &rv| if rv > 0.0 { gv * 0.5 / rv } else { 0.0 });
                self.accum(grads, *a, d);
            }
            Op::ElemMin(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x <= y { gv } else { 0.0 });
                let gb = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x <= y { 0.0 } else { gv });
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::ElemMax(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x >= y { gv } else { 0.0 });
                let gb = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x >= y { 0.0 } else { gv });
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::ClampScalar(a, lo, hi) => {
                let av = self.value(*a);
                let d = ndarray::Zip::from(g)
                    .and(av)
                    .map_collect(|&gv, &x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                self.accum(grads, *a, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self
                    .value(*x)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("conv2d input is CHW");
                let wv = self
                    .value(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("conv2d weight rank");
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("conv2d grad rank");
                let (dx, dw, db) = conv2d_backward(&xv, &wv, &gv, *stride, *pad);
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
                self.accum(grads, *b, db.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let xv = self
                    .value(*x)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("linear input rank");
                let wv = self
                    .value(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("linear weight rank");
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("linear grad rank");
                let dx = wv.t().dot(&gv);
                let (m, n) = wv.dim();
                let mut dw = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    for j in 0..n {
                        dw[[i, j]] = gv[i] * xv[j];
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
                self.accum(grads, *b, gv.to_owned().into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let xv = self
                    .value(*x)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("gap input rank");
                let (c, h, w) = xv.dim();
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("gap grad rank");
                let z = (h * w) as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for k in 0..c {
                    dx.index_axis_mut(Axis(0), k).fill(gv[k] / z);
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::UpsampleNearest2x(x) => {
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("upsample grad rank");
                let (c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for k in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[k, i, j]] = gv[[k, 2 * i, 2 * j]]
                                + gv[[k, 2 * i, 2 * j + 1]]
                                + gv[[k, 2 * i + 1, 2 * j]]
                                + gv[[k, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::UpsampleBilinear { x, .. } => {
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("bilinear grad rank");
                let sv = self.value(*x).shape().to_vec();
                let dx = upsample_bilinear_2d_backward(&gv, sv[0], sv[1]);
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).shape()[0];
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("concat grad rank");
                let ga = gv.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = gv.slice(ndarray::s![ca.., .., ..]).to_owned();
                self.accum(grads, *a, ga.into_dyn());
                self.accum(grads, *b, gb.into_dyn());
            }
            Op::SliceSpatial { x, row, col } => {
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("slice grad rank");
                let mut dx = Arr::zeros(self.value(*x).raw_dim());
                {
                    let mut dx3 = dx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("slice input rank");
                    for (c, &gc) in gv.iter().enumerate() {
                        dx3[[c, *row, *col]] = gc;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Index(x, flat) => {
                let mut dx = Arr::zeros(self.value(*x).raw_dim());
                dx.as_slice_mut().expect("standard layout")[*flat] = scalar_value(g);
                self.accum(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let gs = scalar_value(g);
                self.accum(grads, *x, Arr::from_elem(self.value(*x).raw_dim(), gs));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let gs = scalar_value(g) / n;
                self.accum(grads, *x, Arr::from_elem(self.value(*x).raw_dim(), gs));
            }
            Op::MinAll(x) | Op::MaxAll(x) => {
                let target = scalar_value(self.value(id));
                let xv = self.value(*x);
                let pos = xv
                    .iter()
                    .position(|&v| v == target)
                    .expect("extremum present in input");
                let mut dx = Arr::zeros(xv.raw_dim());
                dx.as_slice_mut().expect("standard layout")[pos] = scalar_value(g);
                self.accum(grads, *x, dx);
            }
            Op::SubScalarNode { a, s } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *s, scalar(-g.sum()));
            }
            Op::DivScalarNode { a, s } => {
                let sv = scalar_value(self.value(*s));
                self.accum(grads, *a, g.mapv(|v| v / sv));
                let ds = -(g * self.value(id)).sum() / sv;
                self.accum(grads, *s, scalar(ds));
            }
            Op::ChannelWeightedSum { x, weights } => {
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("weighted sum grad rank");
                let (h, w) = gv.dim();
                let k = weights.len();
                let mut dx = ndarray::Array3::<f64>::zeros((k, h, w));
                for c in 0..k {
                    dx.index_axis_mut(Axis(0), c).assign(&gv.mapv(|v| v * weights[c]));
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::SelectArgmaxChannels(x) => {
                let xv = self
                    .value(*x)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("argmax select rank");
                let gv = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("argmax select grad rank");
                let (c, h, w) = xv.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let ch = argmax_channel(&xv, i, j);
                        dx[[ch, i, j]] = gv[[i, j]];
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let z = self
                    .value(*logits)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("ce logits rank");
                let gs = scalar_value(g);
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Array1<f64> = z.mapv(|v| (v - m).exp());
                let sum: f64 = exps.sum();
                let mut dz = exps.mapv(|e| e / sum * gs);
                dz[*target] -= gs;
                self.accum(grads, *logits, dz.into_dyn());
            }
            Op::SpatialSoftmaxCrossEntropy { logits, targets } => {
                let z = self
                    .value(*logits)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("spatial ce rank");
                let (c, h, w) = z.dim();
                let gs = scalar_value(g) / (h * w) as f64;
                let mut dz = ndarray::Array3::<f64>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let mut m = f64::NEG_INFINITY;
                        for k in 0..c {
                            m = m.max(z[[k, i, j]]);
                        }
                        let mut s = 0.0;
                        for k in 0..c {
                            s += (z[[k, i, j]] - m).exp();
                        }
                        for k in 0..c {
                            dz[[k, i, j]] = (z[[k, i, j]] - m).exp() / s * gs;
                        }
                        dz[[targets[[i, j]], i, j]] -= gs;
                    }
                }
                self.accum(grads, *logits, dz.into_dyn());
            }
            Op::BceMean {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let gs = scalar_value(g) / n;
                let mut dz = Arr::zeros(z.raw_dim());
                for ((dzi, (&zv, &tv)), &wv) in dz
                    .iter_mut()
                    .zip(z.iter().zip(targets.iter()))
                    .zip(weights.iter())
                {
                    *dzi = wv * (sigmoid(zv) - tv) * gs;
                }
                self.accum(grads, *logits, dz);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len() as f64;
                let gs = scalar_value(g) * 2.0 / n;
                let diff = av - bv;
                self.accum(grads, *a, diff.mapv(|v| v * gs));
                self.accum(grads, *b, diff.mapv(|v| -v * gs));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax_channel(x: &ndarray::ArrayView3<f64>, i: usize, j: usize) -> usize {
    let c = x.dim().0;
    let mut best = 0;
    for k in 1..c {
        if x[[k, i, j]] > x[[best, i, j]] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests;
