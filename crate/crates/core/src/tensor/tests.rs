//! Finite-difference checks for every differentiable op.

use super::*;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn rand_arr(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference check of d(scalar root)/d(leaf) against backward().
fn fd_check<F>(input: Arr, build: F, tol: f64)
where
    F: Fn(&mut Graph, ValueId) -> ValueId,
{
    let mut g = Graph::new();
    let x = g.leaf_with_grad(input.clone());
    let root = build(&mut g, x);
    let grads = g.backward(root);
    let analytic = grads.get(x).expect("leaf must receive a gradient").clone();

    let h = 1e-5;
    let eval = |arr: &Arr| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf_with_grad(arr.clone());
        let root = build(&mut g, x);
        scalar_value(g.value(root))
    };
    for idx in 0..input.len() {
        let mut plus = input.clone();
        plus.as_slice_mut().unwrap()[idx] += h;
        let mut minus = input.clone();
        minus.as_slice_mut().unwrap()[idx] -= h;
        let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let ana = analytic.as_slice().unwrap()[idx];
        let err = (num - ana).abs() / (1.0 + num.abs().max(ana.abs()));
        assert!(
            err < tol,
            "fd mismatch at {idx}: numeric {num} vs analytic {ana}"
        );
    }
}

#[test]
fn fd_elementwise_chain() {
    let x = rand_arr(&[3, 4], 1);
    fd_check(
        x,
        |g, x| {
            let a = g.relu(x);
            let b = g.tanh(a);
            let c = g.sigmoid(b);
            let d = g.leaky_relu(c, 0.2);
            let e = g.scale(d, 1.7);
            g.sum_all(e)
        },
        1e-6,
    );
}

#[test]
fn fd_add_sub_mul() {
    let x = rand_arr(&[2, 5], 2);
    fd_check(
        x,
        |g, x| {
            let c = g.constant(rand_arr(&[2, 5], 99));
            let a = g.add(x, c);
            let b = g.sub(a, x);
            let m = g.mul(b, x);
            let m2 = g.mul(m, m);
            g.mean_all(m2)
        },
        1e-6,
    );
}

#[test]
fn fd_min_max_clamp() {
    // Inputs chosen away from ties and clamp corners so FD is clean.
    let x = rand_arr(&[4, 4], 3).mapv(|v| v * 0.4);
    fd_check(
        x,
        |g, x| {
            let c = g.constant(rand_arr(&[4, 4], 7));
            let lo = g.elem_max(x, c);
            let hi = g.elem_min(lo, x);
            let cl = g.clamp_scalar(hi, -0.3, 0.3);
            g.sum_all(cl)
        },
        1e-5,
    );
}

#[test]
fn fd_conv2d_input_weight_bias() {
    let x = rand_arr(&[2, 6, 6], 4);
    let w = rand_arr(&[3, 2, 3, 3], 5);
    let b = rand_arr(&[3], 6);

    // d/dx
    fd_check(
        x.clone(),
        |g, xid| {
            let wid = g.constant(w.clone());
            let bid = g.constant(b.clone());
            let y = g.conv2d(xid, wid, bid, 2, 1);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        },
        1e-6,
    );
    // d/dw
    fd_check(
        w.clone(),
        |g, wid| {
            let xid = g.constant(x.clone());
            let bid = g.constant(b.clone());
            let y = g.conv2d(xid, wid, bid, 1, 1);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        },
        1e-6,
    );
    // d/db
    fd_check(
        b.clone(),
        |g, bid| {
            let xid = g.constant(x.clone());
            let wid = g.constant(w.clone());
            let y = g.conv2d(xid, wid, bid, 1, 0);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        },
        1e-6,
    );
}

#[test]
fn fd_linear_and_gap() {
    let x = rand_arr(&[3, 4, 4], 8);
    let w = rand_arr(&[5, 3], 9);
    let b = rand_arr(&[5], 10);
    fd_check(
        x,
        |g, xid| {
            let wid = g.constant(w.clone());
            let bid = g.constant(b.clone());
            let p = g.global_avg_pool(xid);
            let y = g.linear(p, wid, bid);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        },
        1e-6,
    );
    fd_check(
        w.clone(),
        |g, wid| {
            let xid = g.constant(rand_arr(&[3], 11));
            let bid = g.constant(b.clone());
            let y = g.linear(xid, wid, bid);
            g.softmax_cross_entropy(y, 2)
        },
        1e-6,
    );
}

#[test]
fn fd_upsample_ops() {
    let x = rand_arr(&[2, 3, 3], 12);
    fd_check(
        x,
        |g, xid| {
            let u = g.upsample_nearest_2x(xid);
            let u2 = g.mul(u, u);
            g.sum_all(u2)
        },
        1e-6,
    );
    let m = rand_arr(&[3, 4], 13);
    fd_check(
        m,
        |g, xid| {
            let u = g.upsample_bilinear(xid, 7, 9);
            let u2 = g.mul(u, u);
            g.mean_all(u2)
        },
        1e-6,
    );
}

#[test]
fn fd_concat_slice_index() {
    let x = rand_arr(&[2, 3, 3], 14);
    fd_check(
        x,
        |g, xid| {
            let c = g.constant(rand_arr(&[1, 3, 3], 15));
            let cat = g.concat_channels(xid, c);
            let fiber = g.slice_spatial(cat, 1, 2);
            let e = g.index(fiber, 1);
            let s = g.mul(e, e);
            let all = g.sum_all(cat);
            g.add(s, all)
        },
        1e-6,
    );
}

#[test]
fn fd_reductions_and_scalar_broadcast() {
    // min-max normalize: (x - min) / (max - min + eps-free path, max != min here)
    let x = rand_arr(&[4, 5], 16);
    fd_check(
        x,
        |g, xid| {
            let lo = g.min_all(xid);
            let hi = g.max_all(xid);
            let range = g.sub(hi, lo);
            let shifted = g.sub_scalar_node(xid, lo);
            let normed = g.div_scalar_node(shifted, range);
            let sq = g.mul(normed, normed);
            g.mean_all(sq)
        },
        1e-4,
    );
}

#[test]
fn fd_channel_weighted_sum_and_argmax_select() {
    let x = rand_arr(&[3, 4, 4], 17);
    let weights = Array1::from_vec(vec![0.5, -1.2, 0.3]);
    fd_check(
        x.clone(),
        |g, xid| {
            let s = g.channel_weighted_sum(xid, weights.clone());
            let r = g.relu(s);
            g.sum_all(r)
        },
        1e-6,
    );
    fd_check(
        x,
        |g, xid| {
            let sel = g.select_argmax_channels(xid);
            let sq = g.mul(sel, sel);
            g.sum_all(sq)
        },
        1e-5,
    );
}

#[test]
fn fd_losses() {
    let z = rand_arr(&[6], 18);
    fd_check(z, |g, zid| g.softmax_cross_entropy(zid, 3), 1e-6);

    let z = rand_arr(&[3, 4, 4], 19);
    let targets = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) % 3);
    fd_check(
        z,
        |g, zid| g.spatial_softmax_cross_entropy(zid, targets.clone()),
        1e-6,
    );

    let z = rand_arr(&[4, 4], 20);
    let t = rand_arr(&[4, 4], 21).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let w = rand_arr(&[4, 4], 22).mapv(|v| v.abs() + 0.5);
    fd_check(z, |g, zid| g.bce_mean(zid, t.clone(), w.clone()), 1e-6);

    let a = rand_arr(&[5, 5], 23);
    let b = rand_arr(&[5, 5], 24);
    fd_check(
        a,
        |g, aid| {
            let bid = g.constant(b.clone());
            g.mse(aid, bid)
        },
        1e-6,
    );
}

#[test]
fn fd_sqrt_std_pipeline() {
    // std = sqrt(mean((x - mean x)^2)), the dispersion-reduction objective.
    let x = rand_arr(&[2, 4, 4], 25);
    fd_check(
        x,
        |g, xid| {
            let m = g.mean_all(xid);
            let centered = g.sub_scalar_node(xid, m);
            let sq = g.mul(centered, centered);
            let var = g.mean_all(sq);
            g.sqrt(var)
        },
        1e-5,
    );
}

#[test]
fn mul_with_shared_input_accumulates_both_edges() {
    // y = x*x, dy/dx = 2x exactly.
    let x = rand_arr(&[3], 26);
    let mut g = Graph::new();
    let xid = g.leaf_with_grad(x.clone());
    let y = g.mul(xid, xid);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let got = grads.get(xid).unwrap();
    let want = x.mapv(|v| 2.0 * v);
    assert!(got
        .iter()
        .zip(want.iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn param_registration_order_is_stable() {
    let mut g = Graph::new();
    let p1 = g.param(rand_arr(&[2], 27));
    let p2 = g.param(rand_arr(&[3], 28));
    assert_eq!(g.param_ids(), &[p1, p2]);
}

#[test]
fn constant_leaves_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(rand_arr(&[4], 29));
    let x = g.leaf_with_grad(rand_arr(&[4], 30));
    let y = g.mul(c, x);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).is_some());
}

#[test]
fn eager_values_match_plain_ndarray() {
    let a = rand_arr(&[3, 3], 31);
    let b = rand_arr(&[3, 3], 32);
    let mut g = Graph::new();
    let aid = g.constant(a.clone());
    let bid = g.constant(b.clone());
    let sum = g.add(aid, bid);
    assert_eq!(g.value(sum), &(&a + &b));
}

#[test]
fn conv_shapes() {
    let x = Array3::<f64>::zeros((3, 64, 64)).into_dyn();
    let w = Array4::<f64>::zeros((16, 3, 3, 3)).into_dyn();
    let b = Array1::<f64>::zeros(16).into_dyn();
    let mut g = Graph::new();
    let xid = g.constant(x);
    let wid = g.constant(w);
    let bid = g.constant(b);
    let y = g.conv2d(xid, wid, bid, 2, 1);
    assert_eq!(g.value(y).shape(), &[16, 32, 32]);
}
